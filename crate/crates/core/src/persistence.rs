//! Binary containers for datasets and network checkpoints.
//!
//! Dataset container (`GFDS`), all integers little-endian:
//!
//! ```text
//! magic "GFDS" | version u32 | kind u32 | precision u32 | count u64 | dim u64
//! | aux [u32; 4] | crc32 u32 | payload (count·dim floats)
//! ```
//!
//! The CRC covers every header field after the magic and the whole payload.
//!
//! Checkpoint (`GFNC1`):
//!
//! ```text
//! magic "GFNC1" | header_len u32 | JSON header | parameter block | crc32 u32
//! ```
//!
//! The CRC covers everything before it. The JSON header records the format
//! version, precision and parameter count around a caller-supplied body.

use std::fs;
use std::io;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DATASET_MAGIC: [u8; 4] = *b"GFDS";
pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: [u8; 5] = *b"GFNC1";
pub const CHECKPOINT_VERSION: u32 = 1;

const DATASET_HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8 + 8 + 16 + 4;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes")]
    Magic,
    #[error("unsupported version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("file truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("unknown precision code {0}")]
    Precision(u32),
    #[error("unknown payload kind {0}")]
    Kind(u32),
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
    #[error("payload has {found} values, expected {expected}")]
    Count { expected: usize, found: usize },
    #[error("malformed header: {0}")]
    Header(String),
}

/// Float width of a stored block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    fn code(self) -> u32 {
        match self {
            Precision::F64 => 0,
            Precision::F32 => 1,
        }
    }

    fn from_code(c: u32) -> Result<Self, PersistError> {
        match c {
            0 => Ok(Precision::F64),
            1 => Ok(Precision::F32),
            other => Err(PersistError::Precision(other)),
        }
    }

    fn width(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }
}

/// What a dataset container holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadKind {
    /// Rows of concatenated `(x0, x1, c0, c1, meta)`.
    PairedSamples,
    /// A plain row-major matrix.
    Matrix,
}

impl PayloadKind {
    fn code(self) -> u32 {
        match self {
            PayloadKind::PairedSamples => 1,
            PayloadKind::Matrix => 2,
        }
    }

    fn from_code(c: u32) -> Result<Self, PersistError> {
        match c {
            1 => Ok(PayloadKind::PairedSamples),
            2 => Ok(PayloadKind::Matrix),
            other => Err(PersistError::Kind(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContainerHeader {
    pub kind: PayloadKind,
    pub precision: Precision,
    pub count: u64,
    pub dim: u64,
    /// Kind-specific layout hints (for paired samples: x, condition and meta widths).
    pub aux: [u32; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: ContainerHeader,
    pub data: Vec<f64>,
}

fn encode_floats(out: &mut Vec<u8>, data: &[f64], precision: Precision) {
    match precision {
        Precision::F64 => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Precision::F32 => data
            .iter()
            .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
    }
}

fn decode_floats(bytes: &[u8], precision: Precision) -> Vec<f64> {
    match precision {
        Precision::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Precision::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    }
}

fn need(bytes: &[u8], n: usize) -> Result<(), PersistError> {
    if bytes.len() < n {
        return Err(PersistError::Truncated {
            needed: n,
            available: bytes.len(),
        });
    }
    Ok(())
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

pub fn encode_container(c: &Container) -> Result<Vec<u8>, PersistError> {
    let h = &c.header;
    let expected = (h.count * h.dim) as usize;
    if c.data.len() != expected {
        return Err(PersistError::Count {
            expected,
            found: c.data.len(),
        });
    }
    let mut fields = Vec::with_capacity(48);
    fields.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    fields.extend_from_slice(&h.kind.code().to_le_bytes());
    fields.extend_from_slice(&h.precision.code().to_le_bytes());
    fields.extend_from_slice(&h.count.to_le_bytes());
    fields.extend_from_slice(&h.dim.to_le_bytes());
    for a in h.aux {
        fields.extend_from_slice(&a.to_le_bytes());
    }
    let mut payload = Vec::with_capacity(expected * h.precision.width());
    encode_floats(&mut payload, &c.data, h.precision);
    let mut crc = crc32fast::Hasher::new();
    crc.update(&fields);
    crc.update(&payload);

    let mut out = Vec::with_capacity(DATASET_HEADER_LEN + payload.len());
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&fields);
    out.extend_from_slice(&crc.finalize().to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<Container, PersistError> {
    need(bytes, DATASET_HEADER_LEN)?;
    if bytes[..4] != DATASET_MAGIC {
        return Err(PersistError::Magic);
    }
    let fields = &bytes[4..DATASET_HEADER_LEN - 4];
    let stored = u32_at(bytes, DATASET_HEADER_LEN - 4);
    let payload = &bytes[DATASET_HEADER_LEN..];
    let mut crc = crc32fast::Hasher::new();
    crc.update(fields);
    crc.update(payload);
    let computed = crc.finalize();

    let version = u32_at(fields, 0);
    if version != DATASET_VERSION {
        return Err(PersistError::Version {
            expected: DATASET_VERSION,
            found: version,
        });
    }
    if stored != computed {
        return Err(PersistError::Checksum { stored, computed });
    }
    let kind = PayloadKind::from_code(u32_at(fields, 4))?;
    let precision = Precision::from_code(u32_at(fields, 8))?;
    let count = u64_at(fields, 12);
    let dim = u64_at(fields, 20);
    let mut aux = [0u32; 4];
    for (k, a) in aux.iter_mut().enumerate() {
        *a = u32_at(fields, 28 + 4 * k);
    }
    let values = count
        .checked_mul(dim)
        .and_then(|v| usize::try_from(v).ok())
        .ok_or_else(|| PersistError::Header("count × dim overflows".into()))?;
    let len = values
        .checked_mul(precision.width())
        .ok_or_else(|| PersistError::Header("payload size overflows".into()))?;
    if payload.len() < len {
        return Err(PersistError::Truncated {
            needed: DATASET_HEADER_LEN + len,
            available: bytes.len(),
        });
    }
    if payload.len() > len {
        return Err(PersistError::Trailing(payload.len() - len));
    }
    Ok(Container {
        header: ContainerHeader {
            kind,
            precision,
            count,
            dim,
            aux,
        },
        data: decode_floats(payload, precision),
    })
}

pub fn write_container(path: &Path, c: &Container) -> Result<(), PersistError> {
    fs::write(path, encode_container(c)?)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Container, PersistError> {
    decode_container(&fs::read(path)?)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointEnvelope<H> {
    format_version: u32,
    precision: Precision,
    param_count: usize,
    body: H,
}

/// Serialises `body` and `params` into a `GFNC1` checkpoint.
pub fn encode_checkpoint<H: Serialize>(body: &H, params: &[f64], precision: Precision) -> Result<Vec<u8>, PersistError> {
    let envelope = CheckpointEnvelope {
        format_version: CHECKPOINT_VERSION,
        precision,
        param_count: params.len(),
        body,
    };
    let header = serde_json::to_vec(&envelope).map_err(|e| PersistError::Header(e.to_string()))?;
    let header_len = u32::try_from(header.len()).map_err(|_| PersistError::Header("header too large".into()))?;
    let mut out = Vec::with_capacity(5 + 4 + header.len() + params.len() * precision.width() + 4);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    encode_floats(&mut out, params, precision);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Inverse of [`encode_checkpoint`]; parameters are widened to `f64`.
pub fn decode_checkpoint<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, Precision, Vec<f64>), PersistError> {
    need(bytes, 5 + 4 + 4)?;
    if bytes[..4] != CHECKPOINT_MAGIC[..4] {
        return Err(PersistError::Magic);
    }
    if bytes[4] != CHECKPOINT_MAGIC[4] {
        let found = (bytes[4] as char).to_digit(10).unwrap_or(u32::MAX);
        return Err(PersistError::Version {
            expected: CHECKPOINT_VERSION,
            found,
        });
    }
    let body_end = bytes.len() - 4;
    let stored = u32_at(bytes, body_end);
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(PersistError::Checksum { stored, computed });
    }
    let header_len = u32_at(bytes, 5) as usize;
    need(&bytes[..body_end], 9 + header_len)?;
    let envelope: CheckpointEnvelope<H> =
        serde_json::from_slice(&bytes[9..9 + header_len]).map_err(|e| PersistError::Header(e.to_string()))?;
    if envelope.format_version != CHECKPOINT_VERSION {
        return Err(PersistError::Version {
            expected: CHECKPOINT_VERSION,
            found: envelope.format_version,
        });
    }
    let block = &bytes[9 + header_len..body_end];
    let len = envelope.param_count * envelope.precision.width();
    if block.len() < len {
        return Err(PersistError::Truncated {
            needed: 9 + header_len + len + 4,
            available: bytes.len(),
        });
    }
    if block.len() > len {
        return Err(PersistError::Trailing(block.len() - len));
    }
    Ok((envelope.body, envelope.precision, decode_floats(block, envelope.precision)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: u64, d: u64) -> Container {
        Container {
            header: ContainerHeader {
                kind: PayloadKind::Matrix,
                precision: Precision::F64,
                count: n,
                dim: d,
                aux: [1, 2, 3, 4],
            },
            data: (0..n * d).map(|i| (i as f64 * 0.37).sin() * 1e3).collect(),
        }
    }

    #[test]
    fn empty_roundtrip() {
        let c = sample(0, 3);
        assert_eq!(decode_container(&encode_container(&c).unwrap()).unwrap(), c);
    }

    #[test]
    fn values_roundtrip_bitwise() {
        let mut c = sample(5, 3);
        c.data[0] = -0.0;
        c.data[1] = f64::MIN_POSITIVE / 3.0;
        let back = decode_container(&encode_container(&c).unwrap()).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.data), bits(&c.data));
    }

    #[test]
    fn count_mismatch_rejected() {
        let mut c = sample(2, 2);
        c.data.pop();
        assert!(matches!(encode_container(&c), Err(PersistError::Count { .. })));
    }

    #[test]
    fn truncation_detected() {
        let bytes = encode_container(&sample(4, 2)).unwrap();
        for cut in [0, 10, DATASET_HEADER_LEN, bytes.len() - 1] {
            assert!(decode_container(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_version_gate() {
        let params = vec![1.5, -2.25, 3.0];
        let bytes = encode_checkpoint(&"body".to_string(), &params, Precision::F64).unwrap();
        let (body, prec, back): (String, _, _) = decode_checkpoint(&bytes).unwrap();
        assert_eq!((body.as_str(), prec, back), ("body", Precision::F64, params));
        let mut wrong = bytes.clone();
        wrong[4] = b'2';
        assert!(matches!(
            decode_checkpoint::<String>(&wrong),
            Err(PersistError::Version { found: 2, .. })
        ));
    }

    #[test]
    fn f32_checkpoint_is_idempotent() {
        let params = vec![0.1, 1.0 / 3.0, -7.0];
        let a = encode_checkpoint(&0u8, &params, Precision::F32).unwrap();
        let (_, _, back): (u8, _, _) = decode_checkpoint(&a).unwrap();
        assert!((back[1] - 1.0 / 3.0).abs() < 1e-7);
        let b = encode_checkpoint(&0u8, &back, Precision::F32).unwrap();
        assert_eq!(a, b);
    }
}
