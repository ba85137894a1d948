//! Command-line pipeline: `train`, `convert`, `sweep` and `encode-dvs`.
//!
//! Exit codes: 0 success, 1 training or file-system failure, 2 usage or
//! configuration error (including missing inputs and bad image indices),
//! 3 conversion error (including unreadable network files), 4 simulation
//! error. Every command writes `manifest.json` into the output directory,
//! listing every file there with its SHA-256.

mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{parse_range, parse_rates, DataPaths, EventFormat, RunConfig, Split};

use crate::ann::{build_vgg_mini, evaluate, train, AnnError, TrainedNetwork};
use crate::convert::{convert, prepare_for_conversion, ConvertError, SpikingNetwork};
use crate::dataset::{load_mnist, normalize, DatasetError, LabeledDataset};
use crate::encoding::{dvs_emulate, events_to_bytes, write_events_csv, EncodingError, Scheme};
use crate::sim::{export_raster, format_sig6, rate_sweep, CompiledNetwork, SimError};

/// Environment variable that overrides `output.dir` (the `--out` flag still
/// wins).
pub const OUT_DIR_ENV: &str = "SPIKECONV_OUT";
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("training failed: {0}")]
    Train(#[source] AnnError),
    #[error("conversion failed: {0}")]
    Convert(#[from] ConvertError),
    #[error("simulation failed: {0}")]
    Sim(#[from] SimError),
    #[error("encoding failed: {0}")]
    Encode(#[from] EncodingError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) | Self::Dataset(_) => 2,
            Self::Encode(
                EncodingError::InvalidConfig(_) | EncodingError::PathOutOfBounds { .. },
            ) => 2,
            Self::Sim(SimError::InvalidConfig(_) | SimError::EmptyDataset) => 2,
            Self::Convert(_) => 3,
            Self::Sim(_) | Self::Encode(_) => 4,
            Self::Train(_) | Self::Io { .. } => 1,
        }
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "spikeconv",
    version,
    about = "Train, convert and simulate spiking MNIST classifiers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every stage (overrides `train.seed` and `sim.seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides `output.dir` and SPIKECONV_OUT).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Comma-separated peak rates in Hz (overrides `sim.rates`).
    #[arg(long, global = true)]
    pub rates: Option<String>,
    /// Image count: training images for `train`, calibration images for
    /// `convert`, evaluation images for `sweep`.
    #[arg(long, global = true)]
    pub subset: Option<usize>,
    /// Image index `N` or inclusive range `A..B` for `encode-dvs` (overrides
    /// `dvs.images`).
    #[arg(long, global = true)]
    pub images: Option<String>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Convert,
    Sweep,
    EncodeDvs,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Convert => "convert",
            Self::Sweep => "sweep",
            Self::EncodeDvs => "encode-dvs",
        }
    }
}

/// What a command produced besides its files.
#[derive(Debug, Default)]
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub timings: BTreeMap<String, f64>,
    pub metrics: BTreeMap<String, f64>,
    pub lines: Vec<String>,
}

impl Outcome {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let value = f();
        self.timings
            .insert(stage.into(), start.elapsed().as_secs_f64());
        value
    }

    fn say(&mut self, line: String) {
        self.lines.push(line);
    }
}

/// Resolve the configuration from file, environment and flags, in
/// increasing precedence.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
        cfg.out_dir = dir.into();
    }
    if let Some(dir) = &cli.out {
        cfg.out_dir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(rates) = &cli.rates {
        cfg.rates = parse_rates(rates)?;
    }
    if let Some(n) = cli.subset {
        match cli.command {
            Command::Train => cfg.train_subset = Some(n),
            Command::Convert => cfg.conversion.calibration_sample_count = n,
            Command::Sweep => cfg.eval_subset = n,
            Command::EncodeDvs => {}
        }
    }
    if let Some(images) = &cli.images {
        cfg.dvs_images = parse_range("--images", images)?;
    }
    Ok(cfg)
}

fn check_input(path: &Path) -> Result<(), HarnessError> {
    if path.exists() {
        Ok(())
    } else {
        Err(HarnessError::Usage(format!(
            "input file {} does not exist",
            path.display()
        )))
    }
}

fn read_input(path: &Path) -> Result<Vec<u8>, HarnessError> {
    check_input(path)?;
    std::fs::read(path).map_err(io_error(path))
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_error(parent))?;
    }
    std::fs::write(path, bytes).map_err(io_error(path))
}

fn load_split(
    cfg: &RunConfig,
    split: Split,
    outcome: &mut Outcome,
) -> Result<LabeledDataset, HarnessError> {
    let (images, labels) = match split {
        Split::Train => (&cfg.data.train_images, &cfg.data.train_labels),
        Split::Test => (&cfg.data.test_images, &cfg.data.test_labels),
    };
    for p in [images, labels] {
        if !p.exists() {
            return Err(HarnessError::Usage(format!(
                "dataset file {} does not exist",
                p.display()
            )));
        }
        outcome.inputs.push(p.clone());
    }
    Ok(load_mnist(images, labels)?)
}

fn subset(data: &LabeledDataset, n: usize, what: &str) -> Result<LabeledDataset, HarnessError> {
    if n == 0 || n > data.len() {
        return Err(HarnessError::Config(format!(
            "{what} subset of {n} images, but the split has {}",
            data.len()
        )));
    }
    Ok(data.head(n))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Outcome, HarnessError> {
    let mut outcome = Outcome::default();
    let start = Instant::now();
    let train_set = load_split(cfg, Split::Train, &mut outcome)?;
    let test_set = load_split(cfg, Split::Test, &mut outcome)?;
    outcome
        .timings
        .insert("load".into(), start.elapsed().as_secs_f64());
    let train_set = match cfg.train_subset {
        Some(n) => subset(&train_set, n, "training")?,
        None => train_set,
    };
    let mut spec = build_vgg_mini(&cfg.model);
    if cfg.prepare {
        spec = prepare_for_conversion(&spec, &cfg.conversion).0;
    }
    let (net, history) = outcome
        .time("train", || train(&spec, &train_set, &cfg.train))
        .map_err(HarnessError::Train)?;
    let accuracy = outcome
        .time("evaluate", || evaluate(&net, &test_set))
        .map_err(HarnessError::Train)?;

    let mut csv = String::from("epoch,mean_loss,train_accuracy\n");
    for e in &history {
        csv.push_str(&format!(
            "{},{},{}\n",
            e.epoch,
            format_sig6(e.mean_loss),
            format_sig6(e.train_accuracy)
        ));
        outcome.say(format!(
            "epoch {}: loss {:.4}, train accuracy {:.4}",
            e.epoch, e.mean_loss, e.train_accuracy
        ));
    }
    write_output(&cfg.network_path(), &net.to_bytes())?;
    write_output(&cfg.out_dir.join("train_metrics.csv"), csv.as_bytes())?;
    outcome.metrics.insert("test_accuracy".into(), accuracy);
    outcome.say(format!("test accuracy: {accuracy:.4}"));
    Ok(outcome)
}

pub fn cmd_convert(cfg: &RunConfig) -> Result<Outcome, HarnessError> {
    let mut outcome = Outcome::default();
    let network_path = cfg.network_path();
    let bytes = read_input(&network_path)?;
    outcome.inputs.push(network_path.clone());
    let net = TrainedNetwork::from_bytes(&bytes).map_err(ConvertError::Ann)?;
    let train_set = load_split(cfg, Split::Train, &mut outcome)?;
    let calibration = subset(
        &train_set,
        cfg.conversion.calibration_sample_count,
        "calibration",
    )?;
    let (snn, report) = outcome.time("convert", || convert(&net, &calibration, &cfg.conversion))?;
    let replayed = report.replay()?;
    if replayed != snn.topology() {
        return Err(ConvertError::NonCompliantTopology(
            "report replay does not reproduce the converted topology".into(),
        )
        .into());
    }
    write_output(&cfg.spiking_path(), &snn.to_bytes())?;
    write_output(
        &cfg.out_dir.join("conversion_report.txt"),
        report.to_text().as_bytes(),
    )?;
    for (i, s) in report.scales.iter().enumerate() {
        outcome.metrics.insert(format!("scale.{i}"), *s);
    }
    outcome
        .metrics
        .insert("substitutions".into(), report.substitutions.len() as f64);
    for s in &report.substitutions {
        outcome.say(format!("layer {}: {}", s.layer, s.detail));
    }
    outcome.say(format!(
        "converted {} neuron layers, scales {:?}",
        report.scales.len(),
        report
            .scales
            .iter()
            .map(|s| format_sig6(*s))
            .collect::<Vec<_>>()
    ));
    Ok(outcome)
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool, HarnessError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Config(format!("sim.threads: {e}")))
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<Outcome, HarnessError> {
    let mut outcome = Outcome::default();
    if cfg.rates.is_empty() {
        return Err(HarnessError::Usage("no rates given".into()));
    }
    let spiking_path = cfg.spiking_path();
    let bytes = read_input(&spiking_path)?;
    outcome.inputs.push(spiking_path.clone());
    let snn = SpikingNetwork::from_bytes(&bytes)?;
    let test_set = load_split(cfg, Split::Test, &mut outcome)?;
    let data = subset(&test_set, cfg.eval_subset, "evaluation")?;
    let pool = thread_pool(cfg.threads)?;
    let sweep = outcome.time("sweep", || {
        pool.install(|| rate_sweep(&snn, &data, &cfg.rates, &cfg.sim))
    })?;
    write_output(&cfg.out_dir.join("sweep.csv"), sweep.to_csv().as_bytes())?;
    write_output(
        &cfg.out_dir.join("accuracy_curves.csv"),
        sweep.curves_csv().as_bytes(),
    )?;
    outcome.say(format!(
        "{} images, T = {} steps",
        data.len(),
        sweep.horizon_steps
    ));
    for row in &sweep.rows {
        outcome.metrics.insert(
            format!("accuracy.{}", format_sig6(row.rate_hz)),
            row.accuracy,
        );
        outcome.say(format!(
            "{:>8} Hz: accuracy {:.4}, {:.0} spikes, first output at step {:.1}",
            format_sig6(row.rate_hz),
            row.accuracy,
            row.mean_spikes,
            row.mean_latency_steps
        ));
    }
    if !cfg.sim.record_rasters.is_empty() {
        let result = outcome.time("rasters", || -> Result<_, HarnessError> {
            let compiled = CompiledNetwork::new(&snn)?;
            let image = normalize(data.image(0));
            let input = compiled.encode(&image, &cfg.sim.encoder_for(0), &cfg.sim)?;
            Ok(compiled.run(&input, &cfg.sim)?)
        })?;
        for &layer in &cfg.sim.record_rasters {
            export_raster(
                &result,
                layer,
                &cfg.out_dir.join(format!("raster_layer{layer}.csv")),
            )?;
        }
    }
    Ok(outcome)
}

pub fn cmd_encode_dvs(cfg: &RunConfig) -> Result<Outcome, HarnessError> {
    let mut outcome = Outcome::default();
    cfg.sim.saccade.validate()?;
    let encoder = crate::encoding::EncoderConfig {
        scheme: Scheme::Dvs,
        ..cfg.sim.encoder.clone()
    };
    encoder.validate()?;
    let data = load_split(cfg, cfg.dvs_split, &mut outcome)?;
    if cfg.dvs_images.end > data.len() {
        return Err(HarnessError::Usage(format!(
            "image range {}..{} exceeds the {} images of the split",
            cfg.dvs_images.start,
            cfg.dvs_images.end - 1,
            data.len()
        )));
    }
    let dir = cfg.out_dir.join("dvs");
    let mut total = 0;
    for i in cfg.dvs_images.clone() {
        let image = normalize(data.image(i));
        let events = dvs_emulate(&image, data.rows(), data.cols(), &cfg.sim.saccade, &encoder)?;
        total += events.len();
        let stem = dir.join(format!("image_{i:05}"));
        if matches!(cfg.dvs_format, EventFormat::Csv | EventFormat::Both) {
            let mut csv = Vec::new();
            write_events_csv(&events, &mut csv).map_err(io_error(&stem))?;
            write_output(&stem.with_extension("csv"), &csv)?;
        }
        if matches!(cfg.dvs_format, EventFormat::Binary | EventFormat::Both) {
            write_output(&stem.with_extension("bin"), &events_to_bytes(&events))?;
        }
    }
    let count = cfg.dvs_images.len();
    outcome
        .metrics
        .insert("mean_events".into(), total as f64 / count as f64);
    outcome.say(format!("{count} images, {total} events"));
    Ok(outcome)
}

#[derive(Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
    bytes: u64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config: BTreeMap<String, String>,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
    timings_s: &'a BTreeMap<String, f64>,
    metrics: &'a BTreeMap<String, f64>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn file_entry(path: &Path, shown: String) -> Result<FileEntry, HarnessError> {
    let bytes = std::fs::read(path).map_err(io_error(path))?;
    Ok(FileEntry {
        path: shown,
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), HarnessError> {
    for entry in std::fs::read_dir(dir).map_err(io_error(dir))? {
        let path = entry.map_err(io_error(dir))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Write the manifest covering every file currently in the output
/// directory.
pub fn write_manifest(
    cfg: &RunConfig,
    command: Command,
    outcome: &Outcome,
) -> Result<PathBuf, HarnessError> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(io_error(&cfg.out_dir))?;
    let manifest_path = cfg.out_dir.join(MANIFEST_NAME);
    let mut files = Vec::new();
    collect_files(&cfg.out_dir, &mut files)?;
    files.retain(|p| p != &manifest_path);
    files.sort();
    let outputs = files
        .iter()
        .map(|p| {
            let rel = p.strip_prefix(&cfg.out_dir).unwrap_or(p);
            file_entry(p, rel.to_string_lossy().replace('\\', "/"))
        })
        .collect::<Result<_, _>>()?;
    let mut inputs: Vec<&PathBuf> = outcome.inputs.iter().collect();
    inputs.sort();
    inputs.dedup();
    let manifest = Manifest {
        tool: "spikeconv",
        version: env!("CARGO_PKG_VERSION"),
        command: command.name(),
        config: cfg.snapshot(),
        inputs: inputs
            .into_iter()
            .map(|p| file_entry(p, p.display().to_string()))
            .collect::<Result<_, _>>()?,
        outputs,
        timings_s: &outcome.timings,
        metrics: &outcome.metrics,
    };
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    write_output(&manifest_path, json.as_bytes())?;
    Ok(manifest_path)
}

pub fn execute(cli: &Cli) -> Result<Outcome, HarnessError> {
    let cfg = resolve_config(cli)?;
    let start = Instant::now();
    let mut outcome = match cli.command {
        Command::Train => cmd_train(&cfg)?,
        Command::Convert => cmd_convert(&cfg)?,
        Command::Sweep => cmd_sweep(&cfg)?,
        Command::EncodeDvs => cmd_encode_dvs(&cfg)?,
    };
    outcome
        .timings
        .insert("total".into(), start.elapsed().as_secs_f64());
    write_manifest(&cfg, cli.command, &outcome)?;
    Ok(outcome)
}

/// Parse arguments, run the command and report; returns the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(outcome) => {
            for line in outcome.lines {
                println!("{line}");
            }
            0
        }
        Err(e) => {
            eprintln!("spikeconv {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}
