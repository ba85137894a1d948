//! ANN-to-SNN conversion: structural substitutions, batch-norm folding,
//! percentile weight normalization and the ReLU-to-spiking-neuron mapping.

mod report;
mod spiking;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use report::{ConversionReport, ReportError, REPORT_FORMAT};
pub use spiking::{
    map_to_spiking, NeuronRole, NeuronStage, SpikingNetwork, Stage, SPIKING_FORMAT_VERSION,
};

use crate::ann::{
    images_to_tensor, AnnError, Layer, LayerParams, LayerSpec, NetworkSpec, TrainedNetwork,
    BATCH_NORM_EPS,
};
use crate::dataset::LabeledDataset;
use crate::neuron::{NeuronError, NeuronParams, ResetMode};

#[derive(Debug, Error)]
pub enum ConvertError {
    #[error("batch norm at layer {layer} does not follow a conv2d or dense layer")]
    OrphanBatchNorm { layer: usize },
    #[error("layer {layer} has a non-positive activation percentile {value}")]
    DegenerateScale { layer: usize, value: f64 },
    #[error("topology cannot be mapped to spiking neurons: {0}")]
    NonCompliantTopology(String),
    #[error("invalid conversion configuration: {0}")]
    InvalidConfig(String),
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error(transparent)]
    Ann(#[from] AnnError),
    #[error(transparent)]
    Neuron(#[from] NeuronError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversionConfig {
    pub neuron_template: NeuronParams,
    /// Percentile in (0, 100] of calibration pre-activations that maps to
    /// the full-scale firing rate.
    pub normalization_percentile: f64,
    /// Spiking neurons per hidden analog unit.
    pub replication_factor: usize,
    pub calibration_sample_count: usize,
    /// Reorder `(relu, avg_pool)` into `(avg_pool, relu)` when preparing an
    /// architecture for training.
    pub pool_before_relu: bool,
    /// Rate of the dropout layer that stands in for a batch norm when
    /// preparing an architecture for training.
    pub substitute_dropout_rate: f64,
}

impl Default for ConversionConfig {
    fn default() -> Self {
        Self {
            neuron_template: NeuronParams {
                reset_mode: ResetMode::SubtractThreshold,
                ..NeuronParams::lif(1.0, DEFAULT_TAU)
            },
            normalization_percentile: 99.9,
            replication_factor: 1,
            calibration_sample_count: 500,
            pool_before_relu: true,
            substitute_dropout_rate: 0.1,
        }
    }
}

/// Default membrane time constant `C_m R_m` of the converted neurons, in
/// seconds. The leak drains roughly `1 / (2 lambda_max tau)` of full scale
/// from every unit, so accuracy depends on the peak input rate and not only
/// on `lambda_max * T`.
pub const DEFAULT_TAU: f64 = 0.033;

impl ConversionConfig {
    pub fn validate(&self) -> Result<(), ConvertError> {
        let bad = |m: String| Err(ConvertError::InvalidConfig(m));
        self.neuron_template.validate()?;
        let p = self.normalization_percentile;
        if !(p > 0.0 && p <= 100.0) {
            return bad(format!("normalization percentile {p} must lie in (0, 100]"));
        }
        if self.replication_factor == 0 {
            return bad("replication factor must be at least 1".into());
        }
        if self.calibration_sample_count == 0 {
            return bad("calibration sample count must be positive".into());
        }
        if !(0.0..1.0).contains(&self.substitute_dropout_rate) {
            return bad(format!(
                "dropout rate {} must lie in [0, 1)",
                self.substitute_dropout_rate
            ));
        }
        Ok(())
    }
}

/// A structural rewrite applied at one source layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// Batch norm absorbed into the preceding conv2d/dense layer.
    FoldBatchNorm,
    /// Batch norm removed without substitute because a pool follows it.
    DeleteBatchNorm,
    BatchNormToDropout {
        rate: f64,
    },
    MaxToAvgPool,
    /// The ReLU at `layer` and the pool at `pool_layer` swap places.
    PoolBeforeRelu {
        pool_layer: usize,
    },
    DeleteDropout,
    DropSoftmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Substitution {
    pub rule: Rule,
    /// Index of the affected layer in the source network.
    pub layer: usize,
    pub detail: String,
}

/// Re-apply `substitutions` to a source layer list. Indices always refer to
/// source positions, so entries compose in order.
pub fn replay(
    source: &[LayerSpec],
    substitutions: &[Substitution],
) -> Result<Vec<LayerSpec>, ConvertError> {
    let mut slots: Vec<Option<LayerSpec>> = source.iter().cloned().map(Some).collect();
    for s in substitutions {
        let out_of_range = || {
            ConvertError::InvalidConfig(format!("substitution refers to missing layer {}", s.layer))
        };
        if s.layer >= slots.len() {
            return Err(out_of_range());
        }
        match &s.rule {
            Rule::FoldBatchNorm
            | Rule::DeleteBatchNorm
            | Rule::DeleteDropout
            | Rule::DropSoftmax => slots[s.layer] = None,
            Rule::BatchNormToDropout { rate } => {
                slots[s.layer] = Some(LayerSpec::Dropout { rate: *rate })
            }
            Rule::MaxToAvgPool => {
                if let Some(LayerSpec::MaxPool { window }) = slots[s.layer] {
                    slots[s.layer] = Some(LayerSpec::AvgPool { window });
                } else {
                    return Err(ConvertError::InvalidConfig(format!(
                        "layer {} is not a max pool",
                        s.layer
                    )));
                }
            }
            Rule::PoolBeforeRelu { pool_layer } => {
                if *pool_layer >= slots.len() {
                    return Err(out_of_range());
                }
                slots.swap(s.layer, *pool_layer);
            }
        }
    }
    Ok(slots.into_iter().flatten().collect())
}

/// Rewrite an untrained architecture so that it converts without loss:
/// batch norm becomes dropout (or disappears when a pool follows it), max
/// pooling becomes average pooling, and optionally average pooling moves
/// ahead of a preceding ReLU.
pub fn prepare_for_conversion(
    spec: &NetworkSpec,
    cfg: &ConversionConfig,
) -> (NetworkSpec, Vec<Substitution>) {
    let layers = &spec.layers;
    let mut subs = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        match layer {
            LayerSpec::BatchNorm { .. } if layers.get(i + 1).is_some_and(LayerSpec::is_pool) => {
                subs.push(Substitution {
                    rule: Rule::DeleteBatchNorm,
                    layer: i,
                    detail: format!("pool at layer {} follows", i + 1),
                })
            }
            LayerSpec::BatchNorm { .. } => subs.push(Substitution {
                rule: Rule::BatchNormToDropout {
                    rate: cfg.substitute_dropout_rate,
                },
                layer: i,
                detail: "no pool follows".into(),
            }),
            LayerSpec::MaxPool { window } => subs.push(Substitution {
                rule: Rule::MaxToAvgPool,
                layer: i,
                detail: format!("window {window}"),
            }),
            _ => {}
        }
    }
    if cfg.pool_before_relu {
        let current = replay(layers, &subs).expect("indices come from the source");
        // Map positions of the rewritten list back to source indices.
        let deleted: Vec<usize> = subs
            .iter()
            .filter(|s| matches!(s.rule, Rule::DeleteBatchNorm))
            .map(|s| s.layer)
            .collect();
        let live: Vec<usize> = (0..layers.len()).filter(|i| !deleted.contains(i)).collect();
        let mut k = 0;
        while k + 1 < current.len() {
            if current[k] == LayerSpec::Relu && matches!(current[k + 1], LayerSpec::AvgPool { .. })
            {
                subs.push(Substitution {
                    rule: Rule::PoolBeforeRelu {
                        pool_layer: live[k + 1],
                    },
                    layer: live[k],
                    detail: "average pooling moved ahead of ReLU".into(),
                });
                k += 2;
            } else {
                k += 1;
            }
        }
    }
    let prepared = NetworkSpec {
        layers: replay(layers, &subs).expect("indices come from the source"),
        ..spec.clone()
    };
    (prepared, subs)
}

/// Absorb every batch norm into the conv2d or dense layer right before it.
pub fn fold_batch_norm(
    net: &TrainedNetwork,
) -> Result<(TrainedNetwork, Vec<Substitution>), ConvertError> {
    let mut layers: Vec<Layer> = Vec::with_capacity(net.layers.len());
    let mut subs = Vec::new();
    for (i, layer) in net.layers.iter().enumerate() {
        let LayerParams::Norm {
            gamma,
            beta,
            running_mean,
            running_var,
        } = &layer.params
        else {
            layers.push(layer.clone());
            continue;
        };
        let prev = match layers.last_mut() {
            Some(prev)
                if matches!(
                    prev.spec,
                    LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. }
                ) && i > 0
                    && !was_folded(&subs, i - 1) =>
            {
                prev
            }
            _ => return Err(ConvertError::OrphanBatchNorm { layer: i }),
        };
        let LayerParams::Affine { weight, bias } = &mut prev.params else {
            return Err(ConvertError::OrphanBatchNorm { layer: i });
        };
        let outputs = bias.len();
        if gamma.len() != outputs {
            return Err(ConvertError::OrphanBatchNorm { layer: i });
        }
        let fan_in = weight.len() / outputs;
        for c in 0..outputs {
            let scale = gamma.data()[c] / (running_var.data()[c] + BATCH_NORM_EPS).sqrt();
            weight.data_mut()[c * fan_in..(c + 1) * fan_in]
                .iter_mut()
                .for_each(|w| *w *= scale);
            let b = &mut bias.data_mut()[c];
            *b = (*b - running_mean.data()[c]) * scale + beta.data()[c];
        }
        subs.push(Substitution {
            rule: Rule::FoldBatchNorm,
            layer: i,
            detail: format!("folded into {} at layer {}", prev.spec.name(), i - 1),
        });
    }
    Ok((
        TrainedNetwork {
            layers,
            ..net.clone()
        },
        subs,
    ))
}

/// A second batch norm right after a folded one has no weight layer of its
/// own to fold into.
fn was_folded(subs: &[Substitution], layer: usize) -> bool {
    subs.iter().any(|s| s.layer == layer)
}

/// Linear-interpolated percentile `p` in `[0, 100]`; reorders `values`.
pub fn percentile(values: &mut [f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    let rank = p / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    let (_, &mut a, upper) = values.select_nth_unstable_by(lo, f64::total_cmp);
    if frac == 0.0 || upper.is_empty() {
        return a;
    }
    let b = upper.iter().copied().fold(f64::INFINITY, f64::min);
    a + frac * (b - a)
}

/// Positions that end a normalization segment: every ReLU, plus the end of
/// the network (before a final softmax, if any).
fn segment_ends(layers: &[Layer]) -> Vec<usize> {
    let mut ends: Vec<usize> = layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.spec == LayerSpec::Relu)
        .map(|(i, _)| i)
        .collect();
    let end = match layers.last() {
        Some(l) if l.spec == LayerSpec::Softmax => layers.len() - 1,
        _ => layers.len(),
    };
    if ends.last() != Some(&end) {
        ends.push(end);
    }
    ends
}

/// Rescale weights so that, per segment ending in a nonlinearity, the
/// chosen percentile of calibration pre-activations becomes 1.
///
/// Segment `l` gets `s_l`; its first weight layer is multiplied by
/// `s_{l-1} / s_l` and all of its biases are divided by `s_l`, with
/// `s_0 = 1`. Each pre-activation is thereby divided by `s_l`, a positive
/// rescaling that ReLU commutes with.
pub fn normalize_weights(
    net: &TrainedNetwork,
    calibration: &LabeledDataset,
    cfg: &ConversionConfig,
) -> Result<(TrainedNetwork, Vec<f64>), ConvertError> {
    cfg.validate()?;
    if calibration.is_empty() {
        return Err(ConvertError::EmptyCalibration);
    }
    if let Some(i) = net
        .layers
        .iter()
        .position(|l| matches!(l.spec, LayerSpec::BatchNorm { .. }))
    {
        return Err(ConvertError::NonCompliantTopology(format!(
            "batch norm at layer {i} must be folded before normalization"
        )));
    }
    let ends = segment_ends(&net.layers);
    let n = calibration.len().min(cfg.calibration_sample_count);
    let mut samples: Vec<Vec<f64>> = vec![Vec::new(); ends.len()];
    const CHUNK: usize = 100;
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let trace = net.forward_trace(&images_to_tensor(calibration, &idx, net.input))?;
        for (s, &end) in samples.iter_mut().zip(&ends) {
            s.extend_from_slice(trace[end].data());
        }
    }
    let mut scales = Vec::with_capacity(ends.len());
    let mut out = net.clone();
    let mut prev_scale = 1.0;
    let mut start = 0;
    for (seg, (&end, values)) in ends.iter().zip(samples.iter_mut()).enumerate() {
        let affine: Vec<usize> = (start..end)
            .filter(|&i| matches!(out.layers[i].params, LayerParams::Affine { .. }))
            .collect();
        let scale = if affine.is_empty() {
            // A parameter-free segment is positively homogeneous; it keeps
            // the incoming scale.
            prev_scale
        } else {
            let value = percentile(values, cfg.normalization_percentile);
            if !(value > 0.0 && value.is_finite()) {
                return Err(ConvertError::DegenerateScale { layer: seg, value });
            }
            value
        };
        for (j, &i) in affine.iter().enumerate() {
            if let LayerParams::Affine { weight, bias } = &mut out.layers[i].params {
                if j == 0 {
                    let f = prev_scale / scale;
                    weight.data_mut().iter_mut().for_each(|w| *w *= f);
                }
                bias.data_mut().iter_mut().for_each(|b| *b /= scale);
            }
        }
        scales.push(scale);
        prev_scale = scale;
        start = end + 1;
    }
    Ok((out, scales))
}

/// Hex SHA-256 of the network's persisted bytes.
pub fn fingerprint(net: &TrainedNetwork) -> String {
    format!("sha256:{:x}", Sha256::digest(net.to_bytes()))
}

/// Full post-training pipeline: fold batch norm, replace max pooling with
/// average pooling, delete dropout, normalize against `calibration`, drop
/// the softmax and map ReLUs to spiking neurons.
pub fn convert(
    net: &TrainedNetwork,
    calibration: &LabeledDataset,
    cfg: &ConversionConfig,
) -> Result<(SpikingNetwork, ConversionReport), ConvertError> {
    cfg.validate()?;
    net.check()?;
    let (folded, mut subs) = fold_batch_norm(net)?;
    // Source indices of the folded network's layers.
    let origin: Vec<usize> = (0..net.layers.len())
        .filter(|i| !subs.iter().any(|s| s.layer == *i))
        .collect();
    let mut layers = Vec::with_capacity(folded.layers.len());
    for (layer, &src) in folded.layers.into_iter().zip(&origin) {
        match layer.spec {
            LayerSpec::MaxPool { window } => {
                subs.push(Substitution {
                    rule: Rule::MaxToAvgPool,
                    layer: src,
                    detail: format!("window {window}"),
                });
                layers.push(Layer::new(LayerSpec::AvgPool { window }, LayerParams::None));
            }
            LayerSpec::Dropout { rate } => subs.push(Substitution {
                rule: Rule::DeleteDropout,
                layer: src,
                detail: format!("rate {rate} is the identity at inference"),
            }),
            _ => layers.push(layer),
        }
    }
    let compliant = TrainedNetwork {
        layers,
        ..net.clone()
    };
    let (normalized, scales) = normalize_weights(&compliant, calibration, cfg)?;
    if normalized.layers.last().map(|l| &l.spec) == Some(&LayerSpec::Softmax) {
        subs.push(Substitution {
            rule: Rule::DropSoftmax,
            layer: net.layers.len() - 1,
            detail: "classes are read out from output spike counts".into(),
        });
    }
    subs.sort_by_key(|s| s.layer);
    let mut snn = map_to_spiking(&normalized, cfg)?;
    snn.set_scales(&scales)?;
    snn.source_fingerprint = fingerprint(net);
    let report = ConversionReport {
        source_fingerprint: snn.source_fingerprint.clone(),
        source_layers: net.layers.iter().map(|l| l.spec.clone()).collect(),
        config: cfg.clone(),
        scales,
        substitutions: subs,
    };
    Ok((snn, report))
}
