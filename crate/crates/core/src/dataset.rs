//! MNIST IDX parsing and the in-memory labeled dataset.
//!
//! IDX layout: two zero bytes, one element-kind byte, one dimension-count
//! byte, one big-endian `u32` per dimension, then the row-major payload with
//! big-endian multi-byte elements. Files whose name ends in `.gz` are
//! decompressed before parsing.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("bad IDX magic: {0}")]
    MagicMismatch(String),
    #[error("IDX data truncated: expected {expected} payload bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("IDX data has {0} trailing bytes after the payload")]
    TrailingBytes(usize),
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Idx {
        path: PathBuf,
        #[source]
        source: IdxError,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("unexpected IDX shape {shape:?} for {what}")]
    BadShape {
        what: &'static str,
        shape: Vec<usize>,
    },
    #[error("label {label} at index {index} is outside 0..=9")]
    BadLabel { index: usize, label: u8 },
}

/// Scalar element type declared in the third magic byte.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementKind {
    U8,
    I8,
    I16,
    I32,
    F32,
    F64,
}

impl ElementKind {
    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0x08 => Self::U8,
            0x09 => Self::I8,
            0x0B => Self::I16,
            0x0C => Self::I32,
            0x0D => Self::F32,
            0x0E => Self::F64,
            _ => return None,
        })
    }

    pub fn code(self) -> u8 {
        match self {
            Self::U8 => 0x08,
            Self::I8 => 0x09,
            Self::I16 => 0x0B,
            Self::I32 => 0x0C,
            Self::F32 => 0x0D,
            Self::F64 => 0x0E,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Self::U8 | Self::I8 => 1,
            Self::I16 => 2,
            Self::I32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

/// A parsed IDX file. The payload is kept as the raw big-endian bytes so that
/// serialization reproduces the input exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    kind: ElementKind,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl IdxArray {
    /// Construct an unsigned-byte array. Panics if the shape is empty, has a
    /// zero dimension, or does not match the data length.
    pub fn from_u8(shape: Vec<usize>, data: Vec<u8>) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0));
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            kind: ElementKind::U8,
            shape,
            data,
        }
    }

    pub fn kind(&self) -> ElementKind {
        self.kind
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    /// Raw payload bytes (big-endian for multi-byte kinds).
    pub fn raw(&self) -> &[u8] {
        &self.data
    }

    /// The payload as unsigned bytes, if that is the element kind.
    pub fn as_u8(&self) -> Option<&[u8]> {
        (self.kind == ElementKind::U8).then_some(&self.data[..])
    }

    pub fn into_u8(self) -> Option<Vec<u8>> {
        (self.kind == ElementKind::U8).then_some(self.data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.shape.len() + self.data.len());
        out.extend_from_slice(&[0, 0, self.kind.code(), self.shape.len() as u8]);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray, IdxError> {
    if bytes.len() < 4 {
        return Err(IdxError::Truncated {
            expected: 4,
            actual: bytes.len(),
        });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(IdxError::MagicMismatch(format!(
            "leading bytes {:02x} {:02x} are not zero",
            bytes[0], bytes[1]
        )));
    }
    let kind = ElementKind::from_code(bytes[2]).ok_or_else(|| {
        IdxError::MagicMismatch(format!("unknown element kind 0x{:02x}", bytes[2]))
    })?;
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(IdxError::MagicMismatch("zero dimensions".into()));
    }
    let header_len = 4 + 4 * ndim;
    if bytes.len() < header_len {
        return Err(IdxError::Truncated {
            expected: header_len,
            actual: bytes.len(),
        });
    }
    let shape: Vec<usize> = bytes[4..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    if shape.contains(&0) {
        return Err(IdxError::MagicMismatch(format!(
            "zero-sized dimension in {shape:?}"
        )));
    }
    let expected = shape.iter().product::<usize>() * kind.size();
    let payload = &bytes[header_len..];
    if payload.len() < expected {
        return Err(IdxError::Truncated {
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(IdxError::TrailingBytes(payload.len() - expected));
    }
    Ok(IdxArray {
        kind,
        shape,
        data: payload.to_vec(),
    })
}

/// Read a file fully, transparently gunzipping `*.gz`.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = File::open(path).map_err(io_err)?;
    let mut bytes = Vec::new();
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(file)
            .read_to_end(&mut bytes)
            .map_err(io_err)?;
    } else {
        file.read_to_end(&mut bytes).map_err(io_err)?;
    }
    Ok(bytes)
}

pub fn read_idx_file(path: &Path) -> Result<IdxArray, DatasetError> {
    let bytes = read_maybe_gz(path)?;
    parse_idx(&bytes).map_err(|source| DatasetError::Idx {
        path: path.to_path_buf(),
        source,
    })
}

/// Images stored as raw bytes, labels as class indices. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    rows: usize,
    cols: usize,
    pixels: Vec<u8>,
    labels: Vec<u8>,
    split_name: String,
}

impl LabeledDataset {
    pub fn new(
        rows: usize,
        cols: usize,
        pixels: Vec<u8>,
        labels: Vec<u8>,
        split_name: impl Into<String>,
    ) -> Result<Self, DatasetError> {
        let per = rows * cols;
        if per == 0 || !pixels.len().is_multiple_of(per) {
            return Err(DatasetError::BadShape {
                what: "images",
                shape: vec![pixels.len(), rows, cols],
            });
        }
        let images = pixels.len() / per;
        if images != labels.len() {
            return Err(DatasetError::CountMismatch {
                images,
                labels: labels.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l > 9) {
            return Err(DatasetError::BadLabel { index, label });
        }
        Ok(Self {
            rows,
            cols,
            pixels,
            labels,
            split_name: split_name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn image_len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let per = self.image_len();
        &self.pixels[i * per..(i + 1) * per]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn split_name(&self) -> &str {
        &self.split_name
    }

    /// Normalized copy of image `i`.
    pub fn image_f64(&self, i: usize) -> Vec<f64> {
        normalize(self.image(i))
    }

    /// The first `n` items (or all of them if fewer exist).
    pub fn head(&self, n: usize) -> Self {
        self.select(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let per = self.image_len();
        let mut pixels = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Self {
            rows: self.rows,
            cols: self.cols,
            pixels,
            labels,
            split_name: self.split_name.clone(),
        }
    }
}

pub fn load_mnist(image_path: &Path, label_path: &Path) -> Result<LabeledDataset, DatasetError> {
    let images = read_idx_file(image_path)?;
    let labels = read_idx_file(label_path)?;
    if images.kind() != ElementKind::U8 || images.shape().len() != 3 {
        return Err(DatasetError::BadShape {
            what: "images",
            shape: images.shape().to_vec(),
        });
    }
    if labels.kind() != ElementKind::U8 || labels.shape().len() != 1 {
        return Err(DatasetError::BadShape {
            what: "labels",
            shape: labels.shape().to_vec(),
        });
    }
    let (rows, cols) = (images.shape()[1], images.shape()[2]);
    if rows != 28 || cols != 28 {
        return Err(DatasetError::BadShape {
            what: "MNIST images",
            shape: images.shape().to_vec(),
        });
    }
    if images.shape()[0] != labels.shape()[0] {
        return Err(DatasetError::CountMismatch {
            images: images.shape()[0],
            labels: labels.shape()[0],
        });
    }
    let split = image_path
        .file_name()
        .map(|f| {
            f.to_string_lossy()
                .split('-')
                .next()
                .unwrap_or("")
                .to_string()
        })
        .unwrap_or_default();
    LabeledDataset::new(
        rows,
        cols,
        images.into_u8().expect("checked kind"),
        labels.into_u8().expect("checked kind"),
        split,
    )
}

/// Locate the four standard MNIST files in `dir`, accepting plain or `.gz`
/// names. Returns `(train_images, train_labels, test_images, test_labels)`.
pub fn mnist_paths(dir: &Path) -> [PathBuf; 4] {
    let names = [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ];
    names.map(|n| {
        let plain = dir.join(n);
        let gz = dir.join(format!("{n}.gz"));
        if !plain.exists() && gz.exists() {
            gz
        } else {
            plain
        }
    })
}

pub fn normalize(image: &[u8]) -> Vec<f64> {
    image.iter().map(|&v| v as f64 / 255.0).collect()
}
