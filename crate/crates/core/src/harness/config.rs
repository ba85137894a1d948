//! Flat `key = value` run configuration.
//!
//! Every key belongs to a stage namespace. [`RunConfig::snapshot`] lists the
//! full resolved key set, which doubles as the reference for valid keys:
//!
//! | key | meaning |
//! |-----|---------|
//! | `data.dir` | directory holding the four MNIST IDX files (plain or `.gz`) |
//! | `data.train_images`, `data.train_labels`, `data.test_images`, `data.test_labels` | per-file overrides |
//! | `model.block_channels` | comma list of conv block widths |
//! | `model.convs_per_block`, `model.hidden` | VGG-mini shape |
//! | `model.pool` | `max` or `avg` |
//! | `model.batch_norm` | `true` / `false` |
//! | `train.prepare` | apply the conversion-ready substitutions before training |
//! | `train.learning_rate`, `train.momentum`, `train.batch_size`, `train.epochs`, `train.seed` | optimizer |
//! | `train.subset` | first N training images, or `all` |
//! | `convert.network` | trained network to convert (empty: `<out>/network.bin`) |
//! | `convert.percentile`, `convert.replication`, `convert.calibration_samples` | normalization and mapping |
//! | `convert.pool_before_relu`, `convert.dropout_rate` | preparation rules |
//! | `neuron.model` | `if` or `lif` |
//! | `neuron.c_m`, `neuron.r_m` (`inf` allowed), `neuron.v_threshold`, `neuron.v_reset` | membrane |
//! | `neuron.refractory_steps`, `neuron.reset` (`value` / `subtract`), `neuron.v_min` (`none` or a number) | |
//! | `sim.network` | spiking network to simulate (empty: `<out>/spiking.bin`) |
//! | `sim.dt`, `sim.horizon_steps`, `sim.seed`, `sim.rate_hz`, `sim.scheme` (`poisson`/`ttfs`/`dvs`) | simulation |
//! | `sim.rates` | comma list of peak rates for `sweep` |
//! | `sim.subset` | first N test images evaluated by `sweep` |
//! | `sim.threads` | worker threads, `0` for all cores |
//! | `sim.record_rasters` | comma list of neuron layers whose rasters `sweep` exports for the first image |
//! | `sim.polarity` | `signed` or `on_only` for DVS input |
//! | `dvs.images` | one image index `i`, or the inclusive range `A..B` |
//! | `dvs.split` | `test` or `train` |
//! | `dvs.format` | `csv`, `binary` or `both` |
//! | `dvs.path` | waypoints `dx:dy,dx:dy,...` |
//! | `dvs.steps_per_segment`, `dvs.threshold`, `dvs.epsilon`, `dvs.padding` | emulator |
//! | `output.dir` | output directory |

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::ann::{PoolKind, TrainConfig, VggMiniConfig};
use crate::convert::ConversionConfig;
use crate::dataset::mnist_paths;
use crate::kv;
use crate::neuron::{NeuronModel, ResetMode};
use crate::sim::{InputPolarity, SimConfig};

use super::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventFormat {
    Csv,
    Binary,
    Both,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl DataPaths {
    pub fn in_dir(dir: &Path) -> Self {
        let [train_images, train_labels, test_images, test_labels] = mnist_paths(dir);
        Self {
            train_images,
            train_labels,
            test_images,
            test_labels,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataPaths,
    pub model: VggMiniConfig,
    pub prepare: bool,
    pub train: TrainConfig,
    pub train_subset: Option<usize>,
    pub conversion: ConversionConfig,
    pub network_path: Option<PathBuf>,
    pub sim: SimConfig,
    pub spiking_path: Option<PathBuf>,
    pub rates: Vec<f64>,
    pub eval_subset: usize,
    pub threads: usize,
    pub dvs_images: Range<usize>,
    pub dvs_split: Split,
    pub dvs_format: EventFormat,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataPaths::in_dir(Path::new("data/mnist")),
            model: VggMiniConfig::default(),
            prepare: true,
            train: TrainConfig::default(),
            train_subset: None,
            conversion: ConversionConfig::default(),
            network_path: None,
            sim: SimConfig::default(),
            spiking_path: None,
            rates: vec![100.0, 200.0, 250.0, 300.0],
            eval_subset: 1000,
            threads: 0,
            dvs_images: 0..10,
            dvs_split: Split::Test,
            dvs_format: EventFormat::Csv,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn config_error(key: &str, detail: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(format!("{key}: {detail}"))
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, HarnessError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| config_error(key, format!("`{value}`: {e}")))
}

fn boolean(key: &str, value: &str) -> Result<bool, HarnessError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(config_error(
            key,
            format!("expected true or false, found `{value}`"),
        )),
    }
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, HarnessError>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

/// Parse a comma-separated list of peak rates in Hz.
pub fn parse_rates(value: &str) -> Result<Vec<f64>, HarnessError> {
    list("sim.rates", value)
}

/// `N` or the inclusive range `A..B`, as a half-open range.
pub fn parse_range(key: &str, value: &str) -> Result<Range<usize>, HarnessError> {
    let range = match value.split_once("..") {
        Some((a, b)) => num(key, a.trim())?..num::<usize>(key, b.trim())? + 1,
        None => {
            let i: usize = num(key, value)?;
            i..i + 1
        }
    };
    if range.is_empty() {
        return Err(config_error(key, format!("empty range `{value}`")));
    }
    Ok(range)
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items
        .into_iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self, HarnessError> {
        let entries = kv::parse(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        let mut cfg = Self::default();
        // data.dir first, so per-file keys override it wherever they appear.
        if let Some((_, dir, _)) = entries.iter().find(|(k, _, _)| k == "data.dir") {
            cfg.data = DataPaths::in_dir(Path::new(dir));
        }
        for (key, value, line) in &entries {
            if key != "data.dir" {
                cfg.set(key, value)
                    .map_err(|e| HarnessError::Config(format!("line {line}: {e}")))?;
            }
        }
        Ok(cfg)
    }

    /// Apply one configuration entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        match key {
            "data.dir" => self.data = DataPaths::in_dir(Path::new(value)),
            "data.train_images" => self.data.train_images = value.into(),
            "data.train_labels" => self.data.train_labels = value.into(),
            "data.test_images" => self.data.test_images = value.into(),
            "data.test_labels" => self.data.test_labels = value.into(),
            "model.block_channels" => self.model.block_channels = list(key, value)?,
            "model.convs_per_block" => self.model.convs_per_block = num(key, value)?,
            "model.hidden" => self.model.hidden = num(key, value)?,
            "model.pool" => {
                self.model.pool = match value {
                    "max" => PoolKind::Max,
                    "avg" => PoolKind::Avg,
                    _ => {
                        return Err(config_error(
                            key,
                            format!("expected max or avg, found `{value}`"),
                        ))
                    }
                }
            }
            "model.batch_norm" => self.model.batch_norm = boolean(key, value)?,
            "train.prepare" => self.prepare = boolean(key, value)?,
            "train.learning_rate" => self.train.learning_rate = num(key, value)?,
            "train.momentum" => self.train.momentum = num(key, value)?,
            "train.batch_size" => self.train.batch_size = num(key, value)?,
            "train.epochs" => self.train.epochs = num(key, value)?,
            "train.seed" => self.train.seed = num(key, value)?,
            "train.subset" => {
                self.train_subset = if value == "all" {
                    None
                } else {
                    Some(num(key, value)?)
                }
            }
            "convert.network" => self.network_path = (!value.is_empty()).then(|| value.into()),
            "convert.percentile" => self.conversion.normalization_percentile = num(key, value)?,
            "convert.replication" => self.conversion.replication_factor = num(key, value)?,
            "convert.calibration_samples" => {
                self.conversion.calibration_sample_count = num(key, value)?
            }
            "convert.pool_before_relu" => self.conversion.pool_before_relu = boolean(key, value)?,
            "convert.dropout_rate" => self.conversion.substitute_dropout_rate = num(key, value)?,
            "neuron.model" => {
                self.conversion.neuron_template.model = match value {
                    "if" => NeuronModel::If,
                    "lif" => NeuronModel::Lif,
                    _ => {
                        return Err(config_error(
                            key,
                            format!("expected if or lif, found `{value}`"),
                        ))
                    }
                }
            }
            "neuron.c_m" => self.conversion.neuron_template.c_m = num(key, value)?,
            "neuron.r_m" => self.conversion.neuron_template.r_m = num(key, value)?,
            "neuron.v_threshold" => self.conversion.neuron_template.v_threshold = num(key, value)?,
            "neuron.v_reset" => self.conversion.neuron_template.v_reset = num(key, value)?,
            "neuron.refractory_steps" => {
                self.conversion.neuron_template.refractory_steps = num(key, value)?
            }
            "neuron.reset" => {
                self.conversion.neuron_template.reset_mode = match value {
                    "value" => ResetMode::ToResetValue,
                    "subtract" => ResetMode::SubtractThreshold,
                    _ => {
                        return Err(config_error(
                            key,
                            format!("expected value or subtract, found `{value}`"),
                        ))
                    }
                }
            }
            "neuron.v_min" => {
                self.conversion.neuron_template.v_min = if value == "none" {
                    None
                } else {
                    Some(num(key, value)?)
                }
            }
            "sim.network" => self.spiking_path = (!value.is_empty()).then(|| value.into()),
            "sim.dt" => {
                self.sim.dt = num(key, value)?;
                self.sim.encoder.dt = self.sim.dt;
            }
            "sim.horizon_steps" => self.sim = self.sim.clone().with_horizon(num(key, value)?),
            "sim.seed" => self.sim = self.sim.clone().with_seed(num(key, value)?),
            "sim.rate_hz" => self.sim.encoder.lambda_max = num(key, value)?,
            "sim.scheme" => {
                self.sim.encoder.scheme = value.parse().map_err(|e: String| config_error(key, e))?
            }
            "sim.rates" => self.rates = list(key, value)?,
            "sim.subset" => self.eval_subset = num(key, value)?,
            "sim.threads" => self.threads = num(key, value)?,
            "sim.record_rasters" => {
                self.sim.record_rasters = list::<usize>(key, value)?
                    .into_iter()
                    .collect::<BTreeSet<_>>()
            }
            "sim.polarity" => {
                self.sim.input_polarity = match value {
                    "signed" => InputPolarity::Signed,
                    "on_only" => InputPolarity::OnOnly,
                    _ => {
                        return Err(config_error(
                            key,
                            format!("expected signed or on_only, found `{value}`"),
                        ))
                    }
                }
            }
            "dvs.images" => self.dvs_images = parse_range(key, value)?,
            "dvs.split" => {
                self.dvs_split = match value {
                    "test" => Split::Test,
                    "train" => Split::Train,
                    _ => {
                        return Err(config_error(
                            key,
                            format!("expected test or train, found `{value}`"),
                        ))
                    }
                }
            }
            "dvs.format" => {
                self.dvs_format = match value {
                    "csv" => EventFormat::Csv,
                    "binary" => EventFormat::Binary,
                    "both" => EventFormat::Both,
                    _ => {
                        return Err(config_error(
                            key,
                            format!("expected csv, binary or both, found `{value}`"),
                        ))
                    }
                }
            }
            "dvs.path" => {
                self.sim.saccade.path = value
                    .split(',')
                    .map(|p| {
                        let (dx, dy) = p.trim().split_once(':').ok_or_else(|| {
                            config_error(key, format!("waypoint `{p}` is not dx:dy"))
                        })?;
                        Ok((num(key, dx.trim())?, num(key, dy.trim())?))
                    })
                    .collect::<Result<_, HarnessError>>()?
            }
            "dvs.steps_per_segment" => self.sim.saccade.steps_per_segment = num(key, value)?,
            "dvs.threshold" => self.sim.saccade.contrast_threshold = num(key, value)?,
            "dvs.epsilon" => self.sim.saccade.log_epsilon = num(key, value)?,
            "dvs.padding" => self.sim.saccade.canvas_padding = num(key, value)?,
            "output.dir" => self.out_dir = value.into(),
            _ => return Err(HarnessError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Apply `--seed`: every stage's seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.sim = self.sim.clone().with_seed(seed);
    }

    pub fn network_path(&self) -> PathBuf {
        self.network_path
            .clone()
            .unwrap_or_else(|| self.out_dir.join("network.bin"))
    }

    pub fn spiking_path(&self) -> PathBuf {
        self.spiking_path
            .clone()
            .unwrap_or_else(|| self.out_dir.join("spiking.bin"))
    }

    /// Every key with its resolved value.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        let n = &self.conversion.neuron_template;
        let sac = &self.sim.saccade;
        let path = |p: &Path| p.display().to_string();
        let entries: Vec<(&str, String)> = vec![
            ("data.train_images", path(&self.data.train_images)),
            ("data.train_labels", path(&self.data.train_labels)),
            ("data.test_images", path(&self.data.test_images)),
            ("data.test_labels", path(&self.data.test_labels)),
            ("model.block_channels", join(&self.model.block_channels)),
            (
                "model.convs_per_block",
                self.model.convs_per_block.to_string(),
            ),
            ("model.hidden", self.model.hidden.to_string()),
            (
                "model.pool",
                match self.model.pool {
                    PoolKind::Max => "max",
                    PoolKind::Avg => "avg",
                }
                .into(),
            ),
            ("model.batch_norm", self.model.batch_norm.to_string()),
            ("train.prepare", self.prepare.to_string()),
            ("train.learning_rate", self.train.learning_rate.to_string()),
            ("train.momentum", self.train.momentum.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.epochs", self.train.epochs.to_string()),
            ("train.seed", self.train.seed.to_string()),
            (
                "train.subset",
                self.train_subset.map_or("all".into(), |n| n.to_string()),
            ),
            (
                "convert.network",
                self.network_path.as_deref().map_or(String::new(), path),
            ),
            (
                "convert.percentile",
                self.conversion.normalization_percentile.to_string(),
            ),
            (
                "convert.replication",
                self.conversion.replication_factor.to_string(),
            ),
            (
                "convert.calibration_samples",
                self.conversion.calibration_sample_count.to_string(),
            ),
            (
                "convert.pool_before_relu",
                self.conversion.pool_before_relu.to_string(),
            ),
            (
                "convert.dropout_rate",
                self.conversion.substitute_dropout_rate.to_string(),
            ),
            (
                "neuron.model",
                match n.model {
                    NeuronModel::If => "if",
                    NeuronModel::Lif => "lif",
                }
                .into(),
            ),
            ("neuron.c_m", n.c_m.to_string()),
            ("neuron.r_m", n.r_m.to_string()),
            ("neuron.v_threshold", n.v_threshold.to_string()),
            ("neuron.v_reset", n.v_reset.to_string()),
            ("neuron.refractory_steps", n.refractory_steps.to_string()),
            (
                "neuron.reset",
                match n.reset_mode {
                    ResetMode::ToResetValue => "value",
                    ResetMode::SubtractThreshold => "subtract",
                }
                .into(),
            ),
            (
                "neuron.v_min",
                n.v_min.map_or("none".into(), |v| v.to_string()),
            ),
            (
                "sim.network",
                self.spiking_path.as_deref().map_or(String::new(), path),
            ),
            ("sim.dt", self.sim.dt.to_string()),
            ("sim.horizon_steps", self.sim.horizon_steps.to_string()),
            ("sim.seed", self.sim.seed.to_string()),
            ("sim.rate_hz", self.sim.encoder.lambda_max.to_string()),
            (
                "sim.scheme",
                format!("{:?}", self.sim.encoder.scheme).to_lowercase(),
            ),
            ("sim.rates", join(&self.rates)),
            ("sim.subset", self.eval_subset.to_string()),
            ("sim.threads", self.threads.to_string()),
            ("sim.record_rasters", join(&self.sim.record_rasters)),
            (
                "sim.polarity",
                match self.sim.input_polarity {
                    InputPolarity::Signed => "signed",
                    InputPolarity::OnOnly => "on_only",
                }
                .into(),
            ),
            (
                "dvs.images",
                format!("{}..{}", self.dvs_images.start, self.dvs_images.end - 1),
            ),
            (
                "dvs.split",
                match self.dvs_split {
                    Split::Train => "train",
                    Split::Test => "test",
                }
                .into(),
            ),
            (
                "dvs.format",
                match self.dvs_format {
                    EventFormat::Csv => "csv",
                    EventFormat::Binary => "binary",
                    EventFormat::Both => "both",
                }
                .into(),
            ),
            (
                "dvs.path",
                join(sac.path.iter().map(|(x, y)| format!("{x}:{y}"))),
            ),
            ("dvs.steps_per_segment", sac.steps_per_segment.to_string()),
            ("dvs.threshold", sac.contrast_threshold.to_string()),
            ("dvs.epsilon", sac.log_epsilon.to_string()),
            ("dvs.padding", sac.canvas_padding.to_string()),
            ("output.dir", path(&self.out_dir)),
        ];
        entries
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    /// The snapshot as a config document that parses back to `self`.
    pub fn to_text(&self) -> String {
        self.snapshot()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("sim.rates", "250, 300").unwrap();
        cfg.set("dvs.path", "0:0,1.5:-2,0:0").unwrap();
        cfg.set("neuron.v_min", "-1").unwrap();
        cfg.set("sim.record_rasters", "0,2").unwrap();
        let again = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(
            RunConfig::from_text(&RunConfig::default().to_text()).unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn data_dir_is_overridden_by_file_keys() {
        let cfg = RunConfig::from_text("data.train_labels = x\ndata.dir = /d\n").unwrap();
        assert_eq!(cfg.data.train_labels, PathBuf::from("x"));
        assert_eq!(
            cfg.data.test_labels,
            PathBuf::from("/d/t10k-labels-idx1-ubyte")
        );
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        for doc in [
            "train.lr = 1",
            "train.epochs = many",
            "model.pool = min",
            "dvs.path = 1,2",
            "dvs.images = 5..4",
        ] {
            assert!(
                matches!(RunConfig::from_text(doc), Err(HarnessError::Config(_))),
                "{doc}"
            );
        }
    }

    #[test]
    fn ranges() {
        assert_eq!(parse_range("k", "7").unwrap(), 7..8);
        assert_eq!(parse_range("k", "0..9").unwrap(), 0..10);
        assert!(parse_range("k", "3..1").is_err());
    }
}
