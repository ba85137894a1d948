//! Python bindings: datasets, training, conversion, simulation and encoders.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use spikeconv::ann::{self, build_vgg_mini, PoolKind, TrainConfig, TrainedNetwork, VggMiniConfig};
use spikeconv::convert::{self, prepare_for_conversion, ConversionConfig, DEFAULT_TAU};
use spikeconv::dataset::{self, LabeledDataset};
use spikeconv::encoding::{self, EncoderConfig, SaccadeConfig, Scheme, SpikeEvents};
use spikeconv::neuron::{self, NeuronModel, NeuronParams, NeuronState, ResetMode};
use spikeconv::sim::{self, SimConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(format!("{}: {e}", path.display()))
}

/// Labelled 8-bit images.
#[pyclass(name = "Dataset", module = "pyspikeconv", frozen)]
#[derive(Clone)]
struct PyDataset {
    inner: LabeledDataset,
}

#[pymethods]
impl PyDataset {
    /// `pixels` holds `len(labels) * rows * cols` bytes, image-major.
    #[new]
    fn new(rows: usize, cols: usize, pixels: Vec<u8>, labels: Vec<u8>) -> PyResult<Self> {
        let inner = LabeledDataset::new(rows, cols, pixels, labels, "python").map_err(value_err)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn rows(&self) -> usize {
        self.inner.rows()
    }

    #[getter]
    fn cols(&self) -> usize {
        self.inner.cols()
    }

    #[getter]
    fn labels(&self) -> Vec<u8> {
        self.inner.labels().to_vec()
    }

    fn label(&self, i: usize) -> PyResult<u8> {
        self.check(i)?;
        Ok(self.inner.label(i))
    }

    /// Image `i` with pixel values scaled to `[0, 1]`.
    fn image(&self, i: usize) -> PyResult<Vec<f64>> {
        self.check(i)?;
        Ok(self.inner.image_f64(i))
    }

    fn head(&self, n: usize) -> Self {
        Self {
            inner: self.inner.head(n.min(self.inner.len())),
        }
    }

    fn __repr__(&self) -> String {
        format!("Dataset({} images of {}x{})", self.inner.len(), self.inner.rows(), self.inner.cols())
    }
}

impl PyDataset {
    fn check(&self, i: usize) -> PyResult<()> {
        if i < self.inner.len() {
            Ok(())
        } else {
            Err(PyIndexError::new_err(format!("image {i} of {}", self.inner.len())))
        }
    }
}

/// Load an MNIST image/label IDX pair (plain or gzip).
#[pyfunction]
fn load_mnist(images: PathBuf, labels: PathBuf) -> PyResult<PyDataset> {
    let inner = dataset::load_mnist(&images, &labels).map_err(|e| io_err(&images, e))?;
    Ok(PyDataset { inner })
}

/// The four MNIST files under `directory`: train images, train labels, test
/// images, test labels.
#[pyfunction]
fn mnist_paths(directory: PathBuf) -> [PathBuf; 4] {
    dataset::mnist_paths(&directory)
}

/// Trained analog network.
#[pyclass(name = "Network", module = "pyspikeconv", frozen)]
struct PyNetwork {
    inner: TrainedNetwork,
}

#[pymethods]
impl PyNetwork {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let bytes = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
        let inner = TrainedNetwork::from_bytes(&bytes).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        std::fs::write(&path, self.inner.to_bytes()).map_err(|e| io_err(&path, e))
    }

    /// Layer kinds in order, e.g. `["conv2d", "dropout", ...]`.
    #[getter]
    fn layers(&self) -> Vec<&'static str> {
        self.inner.layers.iter().map(|l| l.spec.name()).collect()
    }

    fn predict(&self, py: Python<'_>, data: &PyDataset) -> PyResult<Vec<usize>> {
        py.allow_threads(|| self.inner.predict(&data.inner)).map_err(runtime_err)
    }

    fn evaluate(&self, py: Python<'_>, data: &PyDataset) -> PyResult<f64> {
        py.allow_threads(|| ann::evaluate(&self.inner, &data.inner)).map_err(runtime_err)
    }

    fn __repr__(&self) -> String {
        format!("Network({})", self.layers().join(", "))
    }
}

/// Train a VGG-mini on `data`. With `prepare` the architecture is made
/// conversion-ready (dropout for batch norm, average pooling ahead of ReLU)
/// before training.
#[pyfunction]
#[pyo3(signature = (data, *, epochs=4, learning_rate=0.02, momentum=0.9, batch_size=64, seed=1,
    block_channels=vec![16, 32], hidden=128, prepare=true))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    data: &PyDataset,
    epochs: usize,
    learning_rate: f64,
    momentum: f64,
    batch_size: usize,
    seed: u64,
    block_channels: Vec<usize>,
    hidden: usize,
    prepare: bool,
) -> PyResult<(PyNetwork, Vec<(f64, f64)>)> {
    let model = VggMiniConfig {
        block_channels,
        hidden,
        pool: PoolKind::Max,
        ..VggMiniConfig::default()
    };
    let mut spec = build_vgg_mini(&model);
    if prepare {
        spec = prepare_for_conversion(&spec, &ConversionConfig::default()).0;
    }
    let cfg = TrainConfig {
        learning_rate,
        batch_size,
        epochs,
        seed,
        momentum,
    };
    let (inner, history) = py.allow_threads(|| ann::train(&spec, &data.inner, &cfg)).map_err(value_err)?;
    let history = history.iter().map(|e| (e.mean_loss, e.train_accuracy)).collect();
    Ok((PyNetwork { inner }, history))
}

fn neuron_params(model: &str, tau: f64, reset: &str) -> PyResult<NeuronParams> {
    let base = match model {
        "if" => NeuronParams::default(),
        "lif" => NeuronParams::lif(1.0, tau),
        other => return Err(PyValueError::new_err(format!("neuron model `{other}` is not `if` or `lif`"))),
    };
    let reset_mode = match reset {
        "subtract" => ResetMode::SubtractThreshold,
        "value" => ResetMode::ToResetValue,
        other => return Err(PyValueError::new_err(format!("reset `{other}` is not `subtract` or `value`"))),
    };
    Ok(NeuronParams { reset_mode, ..base })
}

/// Spiking network produced by conversion.
#[pyclass(name = "SpikingNetwork", module = "pyspikeconv", frozen)]
struct PySpikingNetwork {
    inner: convert::SpikingNetwork,
}

fn sim_config(rate_hz: f64, steps: u32, seed: u64) -> PyResult<SimConfig> {
    let cfg = SimConfig::new(rate_hz, steps, seed);
    cfg.validate().map_err(value_err)?;
    Ok(cfg)
}

#[pymethods]
impl PySpikingNetwork {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let bytes = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
        let inner = convert::SpikingNetwork::from_bytes(&bytes).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        std::fs::write(&path, self.inner.to_bytes()).map_err(|e| io_err(&path, e))
    }

    /// Normalization scale of each neuron layer.
    #[getter]
    fn scales(&self) -> Vec<f64> {
        self.inner.scales()
    }

    /// Neuron count of each neuron layer, replicas included.
    #[getter]
    fn layer_sizes(&self) -> PyResult<Vec<usize>> {
        let compiled = sim::CompiledNetwork::new(&self.inner).map_err(value_err)?;
        Ok(compiled.layers.iter().map(|l| l.neurons()).collect())
    }

    /// Analog network with the converted topology and normalized weights.
    fn to_analog(&self) -> PyNetwork {
        PyNetwork {
            inner: self.inner.to_trained(),
        }
    }

    /// Poisson-encode `image` (values in `[0, 1]`), simulate and return the
    /// predicted class with the normalized output spike counts.
    #[pyo3(signature = (image, *, rate_hz=300.0, steps=200, seed=1))]
    fn classify(&self, py: Python<'_>, image: Vec<f64>, rate_hz: f64, steps: u32, seed: u64) -> PyResult<(usize, Vec<f64>)> {
        let cfg = sim_config(rate_hz, steps, seed)?;
        let (label, confidence, _) = py.allow_threads(|| sim::classify(&self.inner, &image, &cfg)).map_err(value_err)?;
        Ok((label, confidence))
    }

    /// Run one image and return per-step output counts plus the spikes of
    /// the requested neuron layers as `(t, neuron)` pairs.
    #[pyo3(signature = (image, *, rate_hz=300.0, steps=200, seed=1, record=vec![]))]
    fn run<'py>(
        &self,
        py: Python<'py>,
        image: Vec<f64>,
        rate_hz: f64,
        steps: u32,
        seed: u64,
        record: Vec<usize>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let mut cfg = sim_config(rate_hz, steps, seed)?;
        cfg.record_rasters.extend(record);
        let (_, _, result) = py.allow_threads(|| sim::classify(&self.inner, &image, &cfg)).map_err(value_err)?;
        let out = PyDict::new(py);
        let counts: Vec<Vec<u32>> = result.output_counts.chunks_exact(result.class_count).map(|r| r.to_vec()).collect();
        out.set_item("output_counts", counts)?;
        out.set_item("predicted_label", result.predicted_label)?;
        out.set_item("confidence", result.confidence.clone())?;
        out.set_item("input_spikes", result.input_spikes)?;
        out.set_item("total_spikes", result.total_spikes)?;
        out.set_item("first_output_step", result.first_output_step)?;
        let rasters = PyDict::new(py);
        for (layer, events) in &result.rasters {
            rasters.set_item(layer, pairs(events))?;
        }
        out.set_item("rasters", rasters)?;
        Ok(out)
    }

    /// Accuracy of the count readout after each step `0..=steps`.
    #[pyo3(signature = (data, *, rate_hz=300.0, steps=200, seed=1))]
    fn accuracy_curve(&self, py: Python<'_>, data: &PyDataset, rate_hz: f64, steps: u32, seed: u64) -> PyResult<Vec<f64>> {
        let cfg = sim_config(rate_hz, steps, seed)?;
        py.allow_threads(|| sim::accuracy_curve(&self.inner, &data.inner, &cfg)).map_err(value_err)
    }

    /// Evaluate `data` at each rate; one dict per rate with `rate_hz`,
    /// `accuracy`, `mean_spikes`, `mean_latency_steps` and `curve`.
    #[pyo3(signature = (data, rates, *, steps=100, seed=1))]
    fn rate_sweep<'py>(
        &self,
        py: Python<'py>,
        data: &PyDataset,
        rates: Vec<f64>,
        steps: u32,
        seed: u64,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let cfg = sim_config(300.0, steps, seed)?;
        let sweep = py.allow_threads(|| sim::rate_sweep(&self.inner, &data.inner, &rates, &cfg)).map_err(value_err)?;
        sweep
            .rows
            .iter()
            .zip(&sweep.curves)
            .map(|(row, curve)| {
                let d = PyDict::new(py);
                d.set_item("rate_hz", row.rate_hz)?;
                d.set_item("accuracy", row.accuracy)?;
                d.set_item("mean_spikes", row.mean_spikes)?;
                d.set_item("mean_latency_steps", row.mean_latency_steps)?;
                d.set_item("curve", curve.clone())?;
                Ok(d)
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        format!("SpikingNetwork(scales={:?})", self.inner.scales())
    }
}

/// Convert a trained network. Returns the spiking network and the text of
/// the conversion report.
#[pyfunction]
#[pyo3(signature = (network, calibration, *, percentile=99.9, calibration_samples=500, replication=1,
    neuron="lif", tau=DEFAULT_TAU, reset="subtract"))]
#[allow(clippy::too_many_arguments)]
fn convert_network(
    py: Python<'_>,
    network: &PyNetwork,
    calibration: &PyDataset,
    percentile: f64,
    calibration_samples: usize,
    replication: usize,
    neuron: &str,
    tau: f64,
    reset: &str,
) -> PyResult<(PySpikingNetwork, String)> {
    let cfg = ConversionConfig {
        neuron_template: neuron_params(neuron, tau, reset)?,
        normalization_percentile: percentile,
        replication_factor: replication,
        calibration_sample_count: calibration_samples,
        ..ConversionConfig::default()
    };
    let (inner, report) =
        py.allow_threads(|| convert::convert(&network.inner, &calibration.inner, &cfg)).map_err(value_err)?;
    Ok((PySpikingNetwork { inner }, report.to_text()))
}

fn pairs(events: &SpikeEvents) -> Vec<(u32, u32)> {
    events.events().iter().map(|e| (e.t, e.neuron)).collect()
}

/// Poisson spike trains for `values` in `[0, 1]` as `(t, neuron)` pairs.
#[pyfunction]
#[pyo3(signature = (values, *, rate_hz=300.0, steps=200, seed=1, dt=1e-3))]
fn poisson_encode(values: Vec<f64>, rate_hz: f64, steps: u32, seed: u64, dt: f64) -> PyResult<Vec<(u32, u32)>> {
    let cfg = EncoderConfig {
        lambda_max: rate_hz,
        dt,
        horizon_steps: steps,
        seed,
        scheme: Scheme::Poisson,
    };
    Ok(pairs(&encoding::poisson_encode(&values, &cfg).map_err(value_err)?))
}

/// Events of an emulated event camera moving over `image` along `path`
/// (default: a short triangular saccade), as `(t, pixel, polarity)` with
/// polarity `1` for ON and `-1` for OFF.
#[pyfunction]
#[pyo3(signature = (image, rows, cols, *, steps=200, path=None, steps_per_segment=10, threshold=0.2))]
fn dvs_emulate(
    image: Vec<f64>,
    rows: usize,
    cols: usize,
    steps: u32,
    path: Option<Vec<(f64, f64)>>,
    steps_per_segment: u32,
    threshold: f64,
) -> PyResult<Vec<(u32, u32, i32)>> {
    let default = SaccadeConfig::default();
    let sac = SaccadeConfig {
        path: path.unwrap_or(default.path.clone()),
        steps_per_segment,
        contrast_threshold: threshold,
        ..default
    };
    let cfg = EncoderConfig {
        horizon_steps: steps,
        scheme: Scheme::Dvs,
        ..EncoderConfig::default()
    };
    let events = encoding::dvs_emulate(&image, rows, cols, &sac, &cfg).map_err(value_err)?;
    Ok(events
        .events()
        .iter()
        .map(|e| (e.t, e.neuron, encoding::Polarity::code(e.polarity)))
        .collect())
}

/// Drive one neuron with a constant current and return the steps at which
/// it spikes.
#[pyfunction]
#[pyo3(signature = (current, steps, *, model="if", dt=1e-3, c_m=1.0, r_m=f64::INFINITY, v_threshold=1.0, reset="value"))]
#[allow(clippy::too_many_arguments)]
fn neuron_spike_times(
    current: f64,
    steps: u32,
    model: &str,
    dt: f64,
    c_m: f64,
    r_m: f64,
    v_threshold: f64,
    reset: &str,
) -> PyResult<Vec<u32>> {
    let params = NeuronParams {
        c_m,
        r_m: if model == "if" { f64::INFINITY } else { r_m },
        v_threshold,
        ..neuron_params(model, r_m, reset)?
    };
    params.validate().map_err(value_err)?;
    let mut state = NeuronState::default();
    let mut times = Vec::new();
    for t in 0..steps {
        let (next, spiked) = match params.model {
            NeuronModel::If => neuron::step_if(state, &params, current, dt),
            NeuronModel::Lif => neuron::step_lif(state, &params, current, dt).map_err(value_err)?,
        };
        state = next;
        if spiked {
            times.push(t);
        }
    }
    Ok(times)
}

/// Run the command-line tool with `args` (without the program name);
/// returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("spikeconv".to_owned()).chain(args).collect();
    py.allow_threads(|| spikeconv::harness::run_cli(argv))
}

#[pymodule]
fn pyspikeconv(m: &Bound<'_, PyModule>) -> PyResult<()> {
    spikeconv::tune_allocator();
    m.add("DEFAULT_TAU", DEFAULT_TAU)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PySpikingNetwork>()?;
    m.add_function(wrap_pyfunction!(load_mnist, m)?)?;
    m.add_function(wrap_pyfunction!(mnist_paths, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(convert_network, m)?)?;
    m.add_function(wrap_pyfunction!(poisson_encode, m)?)?;
    m.add_function(wrap_pyfunction!(dvs_emulate, m)?)?;
    m.add_function(wrap_pyfunction!(neuron_spike_times, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
