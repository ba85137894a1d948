//! Versioned binary container used for trained and spiking network files.
//!
//! ```text
//! offset  size  field
//! 0       8     magic (file-kind tag)
//! 8       4     format version, u32 little-endian
//! 12      4     header length H in bytes, u32 little-endian
//! 16      H     UTF-8 JSON header; its "arrays" member lists {name, shape}
//!               for every array in the payload, in payload order
//! 16+H    ...   payload: each array's values as f64 little-endian, row-major
//! ```
//!
//! Writing is deterministic: equal inputs give byte-identical files.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("not a {expected} file (bad magic)")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {found} (this build reads {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("file truncated")]
    Truncated,
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("array {name}: {detail}")]
    BadArray { name: String, detail: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Envelope<H> {
    arrays: Vec<ArrayEntry>,
    body: H,
}

pub fn write<H: Serialize>(
    magic: &[u8; 8],
    version: u32,
    body: &H,
    arrays: &[(String, &Tensor)],
) -> Vec<u8> {
    let envelope = Envelope {
        arrays: arrays
            .iter()
            .map(|(name, t)| ArrayEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        body,
    };
    let header = serde_json::to_vec(&envelope).expect("header types serialize infallibly");
    let payload_len: usize = arrays.iter().map(|(_, t)| t.len() * 8).sum();
    let mut out = Vec::with_capacity(16 + header.len() + payload_len);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in arrays {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read<H: DeserializeOwned>(
    bytes: &[u8],
    magic: &[u8; 8],
    kind: &'static str,
    version: u32,
) -> Result<(H, Vec<(String, Tensor)>), ContainerError> {
    if bytes.len() < 16 {
        return Err(if bytes.starts_with(&magic[..bytes.len().min(8)]) {
            ContainerError::Truncated
        } else {
            ContainerError::BadMagic { expected: kind }
        });
    }
    if &bytes[..8] != magic {
        return Err(ContainerError::BadMagic { expected: kind });
    }
    let found = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if found != version {
        return Err(ContainerError::UnsupportedVersion {
            found,
            supported: version,
        });
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let header = bytes
        .get(16..16 + header_len)
        .ok_or(ContainerError::Truncated)?;
    let envelope: Envelope<H> = serde_json::from_slice(header)?;
    let mut offset = 16 + header_len;
    let mut arrays = Vec::with_capacity(envelope.arrays.len());
    for entry in envelope.arrays {
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(offset..offset + 8 * n)
            .ok_or(ContainerError::Truncated)?;
        offset += 8 * n;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(entry.shape, values).map_err(|e| ContainerError::BadArray {
            name: entry.name.clone(),
            detail: e.to_string(),
        })?;
        arrays.push((entry.name, t));
    }
    if offset != bytes.len() {
        return Err(ContainerError::TrailingBytes(bytes.len() - offset));
    }
    Ok((envelope.body, arrays))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: &[u8; 8] = b"TESTCONT";

    #[test]
    fn round_trip() {
        let a = Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.0, 0.125]).unwrap();
        let bytes = write(MAGIC, 1, &"hello".to_string(), &[("a".into(), &a)]);
        let (body, arrays): (String, _) = read(&bytes, MAGIC, "test", 1).unwrap();
        assert_eq!(body, "hello");
        assert_eq!(arrays, vec![("a".to_string(), a)]);
    }

    #[test]
    fn rejects_corruption() {
        let a = Tensor::zeros(&[3]);
        let bytes = write(MAGIC, 1, &0u8, &[("a".into(), &a)]);
        assert!(matches!(
            read::<u8>(&bytes[..bytes.len() - 1], MAGIC, "test", 1),
            Err(ContainerError::Truncated)
        ));
        assert!(matches!(
            read::<u8>(b"garbage data here", MAGIC, "test", 1),
            Err(ContainerError::BadMagic { .. })
        ));
        assert!(matches!(
            read::<u8>(&bytes, MAGIC, "test", 2),
            Err(ContainerError::UnsupportedVersion { .. })
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            read::<u8>(&extra, MAGIC, "test", 1),
            Err(ContainerError::TrailingBytes(1))
        ));
    }
}
