//! Text form of the conversion report.
//!
//! A `key = value` document (see [`crate::kv`]) with these keys, in order:
//!
//! ```text
//! format = spikeconv-conversion-report/1
//! source.fingerprint = sha256:<hex>
//! source.layers = <n>
//! source.layer.<i> = <kind> [field=value ...]
//! config.neuron.model = if | lif
//! config.neuron.c_m = <real>
//! config.neuron.r_m = <real> | inf
//! config.neuron.v_threshold = <real>
//! config.neuron.v_reset = <real>
//! config.neuron.refractory_steps = <int>
//! config.neuron.reset_mode = to_reset_value | subtract_threshold
//! config.neuron.v_min = <real> | none
//! config.normalization_percentile = <real>
//! config.replication_factor = <int>
//! config.calibration_sample_count = <int>
//! config.pool_before_relu = true | false
//! config.substitute_dropout_rate = <real>
//! scales = <n>
//! scale.<l> = <real>
//! substitutions = <n>
//! substitution.<k>.rule = <rule> [field=value ...]
//! substitution.<k>.layer = <source layer index>
//! substitution.<k>.detail = <free text>
//! ```
//!
//! Reals are written in shortest round-trip form.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde_json::{Map, Value};
use thiserror::Error;

use super::{replay, ConversionConfig, ConvertError, Rule, Substitution};
use crate::ann::LayerSpec;
use crate::kv::{self, KvError};
use crate::neuron::{NeuronModel, NeuronParams, ResetMode};

pub const REPORT_FORMAT: &str = "spikeconv-conversion-report/1";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Syntax(#[from] KvError),
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("key `{key}`: {detail}")]
    Value { key: String, detail: String },
    #[error("unexpected key `{0}`")]
    Unexpected(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConversionReport {
    pub source_fingerprint: String,
    pub source_layers: Vec<LayerSpec>,
    pub config: ConversionConfig,
    /// Normalization scale per neuron stage, in order.
    pub scales: Vec<f64>,
    pub substitutions: Vec<Substitution>,
}

impl ConversionReport {
    /// Apply the substitutions to the recorded source layers; the result
    /// equals the converted network's topology plus its dropped softmax.
    pub fn replay(&self) -> Result<Vec<LayerSpec>, ConvertError> {
        replay(&self.source_layers, &self.substitutions)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("format", REPORT_FORMAT.into());
        put("source.fingerprint", self.source_fingerprint.clone());
        put("source.layers", self.source_layers.len().to_string());
        for (i, l) in self.source_layers.iter().enumerate() {
            put(&format!("source.layer.{i}"), layer_to_text(l));
        }
        let c = &self.config;
        let n = &c.neuron_template;
        put(
            "config.neuron.model",
            match n.model {
                NeuronModel::If => "if",
                NeuronModel::Lif => "lif",
            }
            .into(),
        );
        put("config.neuron.c_m", n.c_m.to_string());
        put("config.neuron.r_m", n.r_m.to_string());
        put("config.neuron.v_threshold", n.v_threshold.to_string());
        put("config.neuron.v_reset", n.v_reset.to_string());
        put(
            "config.neuron.refractory_steps",
            n.refractory_steps.to_string(),
        );
        put(
            "config.neuron.reset_mode",
            match n.reset_mode {
                ResetMode::ToResetValue => "to_reset_value",
                ResetMode::SubtractThreshold => "subtract_threshold",
            }
            .into(),
        );
        put(
            "config.neuron.v_min",
            n.v_min.map_or("none".into(), |v| v.to_string()),
        );
        put(
            "config.normalization_percentile",
            c.normalization_percentile.to_string(),
        );
        put(
            "config.replication_factor",
            c.replication_factor.to_string(),
        );
        put(
            "config.calibration_sample_count",
            c.calibration_sample_count.to_string(),
        );
        put("config.pool_before_relu", c.pool_before_relu.to_string());
        put(
            "config.substitute_dropout_rate",
            c.substitute_dropout_rate.to_string(),
        );
        put("scales", self.scales.len().to_string());
        for (i, s) in self.scales.iter().enumerate() {
            put(&format!("scale.{i}"), s.to_string());
        }
        put("substitutions", self.substitutions.len().to_string());
        for (i, s) in self.substitutions.iter().enumerate() {
            put(&format!("substitution.{i}.rule"), rule_to_text(&s.rule));
            put(&format!("substitution.{i}.layer"), s.layer.to_string());
            put(
                &format!("substitution.{i}.detail"),
                s.detail.replace(['\n', '#'], " "),
            );
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, ReportError> {
        let entries = kv::parse(text)?;
        let mut map: HashMap<String, String> =
            entries.into_iter().map(|(k, v, _)| (k, v)).collect();
        let mut take = |key: &str| {
            map.remove(key)
                .ok_or_else(|| ReportError::Missing(key.to_string()))
        };
        let format = take("format")?;
        if format != REPORT_FORMAT {
            return Err(value_err(
                "format",
                format!("unsupported format `{format}`"),
            ));
        }
        let source_fingerprint = take("source.fingerprint")?;
        let layer_count: usize = parse_num("source.layers", &take("source.layers")?)?;
        let mut source_layers = Vec::with_capacity(layer_count);
        for i in 0..layer_count {
            let key = format!("source.layer.{i}");
            source_layers.push(layer_from_text(&take(&key)?).map_err(|d| value_err(&key, d))?);
        }
        let model = match take("config.neuron.model")?.as_str() {
            "if" => NeuronModel::If,
            "lif" => NeuronModel::Lif,
            other => {
                return Err(value_err(
                    "config.neuron.model",
                    format!("unknown model `{other}`"),
                ))
            }
        };
        let reset_mode = match take("config.neuron.reset_mode")?.as_str() {
            "to_reset_value" => ResetMode::ToResetValue,
            "subtract_threshold" => ResetMode::SubtractThreshold,
            other => {
                return Err(value_err(
                    "config.neuron.reset_mode",
                    format!("unknown mode `{other}`"),
                ))
            }
        };
        let v_min = match take("config.neuron.v_min")?.as_str() {
            "none" => None,
            v => Some(parse_num("config.neuron.v_min", v)?),
        };
        let refractory_steps = parse_num(
            "config.neuron.refractory_steps",
            &take("config.neuron.refractory_steps")?,
        )?;
        let mut num = |key: &str| -> Result<f64, ReportError> { parse_num(key, &take(key)?) };
        let neuron_template = NeuronParams {
            model,
            c_m: num("config.neuron.c_m")?,
            r_m: num("config.neuron.r_m")?,
            v_threshold: num("config.neuron.v_threshold")?,
            v_reset: num("config.neuron.v_reset")?,
            refractory_steps,
            reset_mode,
            v_min,
        };
        let normalization_percentile = num("config.normalization_percentile")?;
        let mut take = |key: &str| {
            map.remove(key)
                .ok_or_else(|| ReportError::Missing(key.to_string()))
        };
        let config = ConversionConfig {
            neuron_template,
            normalization_percentile,
            replication_factor: parse_num(
                "config.replication_factor",
                &take("config.replication_factor")?,
            )?,
            calibration_sample_count: parse_num(
                "config.calibration_sample_count",
                &take("config.calibration_sample_count")?,
            )?,
            pool_before_relu: parse_num(
                "config.pool_before_relu",
                &take("config.pool_before_relu")?,
            )?,
            substitute_dropout_rate: parse_num(
                "config.substitute_dropout_rate",
                &take("config.substitute_dropout_rate")?,
            )?,
        };
        let scale_count: usize = parse_num("scales", &take("scales")?)?;
        let scales = (0..scale_count)
            .map(|i| {
                let key = format!("scale.{i}");
                parse_num(&key, &take(&key)?)
            })
            .collect::<Result<Vec<f64>, _>>()?;
        let sub_count: usize = parse_num("substitutions", &take("substitutions")?)?;
        let mut substitutions = Vec::with_capacity(sub_count);
        for i in 0..sub_count {
            let rule_key = format!("substitution.{i}.rule");
            let layer_key = format!("substitution.{i}.layer");
            substitutions.push(Substitution {
                rule: rule_from_text(&take(&rule_key)?).map_err(|d| value_err(&rule_key, d))?,
                layer: parse_num(&layer_key, &take(&layer_key)?)?,
                detail: take(&format!("substitution.{i}.detail"))?,
            });
        }
        if let Some(key) = map.into_keys().min() {
            return Err(ReportError::Unexpected(key));
        }
        Ok(Self {
            source_fingerprint,
            source_layers,
            config,
            scales,
            substitutions,
        })
    }
}

fn value_err(key: &str, detail: String) -> ReportError {
    ReportError::Value {
        key: key.to_string(),
        detail,
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ReportError>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e: T::Err| value_err(key, format!("`{v}`: {e}")))
}

/// `<tag> field=value ...` from a JSON object whose fields are scalars.
fn fields_to_text(tag: &str, fields: &Map<String, Value>) -> String {
    let mut s = tag.to_string();
    for (k, v) in fields {
        let _ = write!(s, " {k}={v}");
    }
    s
}

fn text_to_fields(text: &str) -> Result<(String, Map<String, Value>), String> {
    let mut parts = text.split_whitespace();
    let tag = parts.next().ok_or("empty value")?.to_string();
    let mut fields = Map::new();
    for part in parts {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| format!("expected field=value, found `{part}`"))?;
        let value: Value = serde_json::from_str(v).map_err(|e| format!("field `{k}`: {e}"))?;
        fields.insert(k.to_string(), value);
    }
    Ok((tag, fields))
}

fn layer_to_text(layer: &LayerSpec) -> String {
    let Value::Object(mut obj) = serde_json::to_value(layer).expect("layer specs serialize") else {
        unreachable!("layer specs serialize to objects")
    };
    let kind = obj
        .remove("kind")
        .and_then(|k| k.as_str().map(String::from))
        .expect("tagged");
    fields_to_text(&kind, &obj)
}

fn layer_from_text(text: &str) -> Result<LayerSpec, String> {
    let (kind, mut fields) = text_to_fields(text)?;
    fields.insert("kind".into(), Value::String(kind));
    serde_json::from_value(Value::Object(fields)).map_err(|e| e.to_string())
}

fn rule_to_text(rule: &Rule) -> String {
    match serde_json::to_value(rule).expect("rules serialize") {
        Value::String(tag) => tag,
        Value::Object(obj) => {
            let (tag, inner) = obj.into_iter().next().expect("externally tagged");
            fields_to_text(&tag, inner.as_object().expect("struct variant"))
        }
        _ => unreachable!("rules serialize to strings or objects"),
    }
}

fn rule_from_text(text: &str) -> Result<Rule, String> {
    let (tag, fields) = text_to_fields(text)?;
    let value = if fields.is_empty() {
        Value::String(tag)
    } else {
        Value::Object(Map::from_iter([(tag, Value::Object(fields))]))
    };
    serde_json::from_value(value).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ConversionReport {
        ConversionReport {
            source_fingerprint: "sha256:00ff".into(),
            source_layers: vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 4,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::BatchNorm { channels: 4 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dropout { rate: 0.25 },
                LayerSpec::Dense {
                    inputs: 196,
                    outputs: 10,
                },
                LayerSpec::Softmax,
            ],
            config: ConversionConfig {
                neuron_template: NeuronParams {
                    v_min: Some(-2.5),
                    ..NeuronParams::default()
                },
                ..ConversionConfig::default()
            },
            scales: vec![3.25, 0.1 + 0.2],
            substitutions: vec![
                Substitution {
                    rule: Rule::FoldBatchNorm,
                    layer: 1,
                    detail: "folded into conv2d at layer 0".into(),
                },
                Substitution {
                    rule: Rule::MaxToAvgPool,
                    layer: 3,
                    detail: "window 2".into(),
                },
                Substitution {
                    rule: Rule::DeleteDropout,
                    layer: 5,
                    detail: "x".into(),
                },
                Substitution {
                    rule: Rule::DropSoftmax,
                    layer: 7,
                    detail: "y".into(),
                },
            ],
        }
    }

    #[test]
    fn text_round_trip_is_exact() {
        let r = sample();
        let text = r.to_text();
        assert!(text.starts_with("format = spikeconv-conversion-report/1\n"));
        assert!(text.contains(
            "source.layer.0 = conv2d in_channels=1 kernel=3 out_channels=4 padding=1 stride=1\n"
        ));
        assert!(text.contains("config.neuron.r_m = inf\n"));
        assert_eq!(ConversionReport::from_text(&text).unwrap(), r);
    }

    #[test]
    fn rules_with_fields_round_trip() {
        for rule in [
            Rule::BatchNormToDropout { rate: 0.1 },
            Rule::PoolBeforeRelu { pool_layer: 4 },
            Rule::DeleteBatchNorm,
        ] {
            assert_eq!(rule_from_text(&rule_to_text(&rule)).unwrap(), rule);
        }
        assert_eq!(
            rule_to_text(&Rule::PoolBeforeRelu { pool_layer: 4 }),
            "pool_before_relu pool_layer=4"
        );
    }

    #[test]
    fn replay_reproduces_result() {
        assert_eq!(
            sample().replay().unwrap(),
            vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 4,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::AvgPool { window: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: 196,
                    outputs: 10
                },
            ]
        );
    }

    #[test]
    fn rejects_bad_documents() {
        let text = sample().to_text();
        assert!(matches!(
            ConversionReport::from_text(&text.replace("scale.1 =", "bogus =")),
            Err(ReportError::Missing(_))
        ));
        assert!(matches!(
            ConversionReport::from_text(&format!("{text}extra = 1\n")),
            Err(ReportError::Unexpected(_))
        ));
        assert!(ConversionReport::from_text(&text.replace("report/1", "report/2")).is_err());
    }
}
