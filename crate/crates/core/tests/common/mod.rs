#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use spikeconv::ann::{build_vgg_mini, train, TrainConfig, TrainedNetwork, VggMiniConfig};
use spikeconv::convert::{prepare_for_conversion, ConversionConfig};
use spikeconv::dataset::{load_mnist, mnist_paths, LabeledDataset};

/// `SPIKECONV_MNIST_DIR`, or `data/mnist` at the workspace root.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os("SPIKECONV_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

pub struct Mnist {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn mnist() -> &'static Mnist {
    static DATA: OnceLock<Mnist> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = mnist_dir();
        let [a, b, c, d] = mnist_paths(&dir);
        let load = |i, l| {
            load_mnist(i, l).unwrap_or_else(|e| {
                panic!(
                    "MNIST not found under {} ({e}); set SPIKECONV_MNIST_DIR",
                    dir.display()
                )
            })
        };
        Mnist {
            train: load(&a, &b),
            test: load(&c, &d),
        }
    })
}

/// Conversion-ready VGG-mini trained briefly on the first 12,000 training
/// images.
pub fn quick_network() -> &'static TrainedNetwork {
    static NET: OnceLock<TrainedNetwork> = OnceLock::new();
    NET.get_or_init(|| {
        spikeconv::tune_allocator();
        let spec = prepare_for_conversion(
            &build_vgg_mini(&VggMiniConfig::default()),
            &ConversionConfig::default(),
        )
        .0;
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        train(&spec, &mnist().train.head(12_000), &cfg).unwrap().0
    })
}
