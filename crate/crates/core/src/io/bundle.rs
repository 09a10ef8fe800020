//! Record bundles: a 28-byte little-endian header followed by fixed-size
//! records of a `u64` id and an f32 payload.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "THFL"
//!      4     4  version (1)
//!      8     4  kind (0 query states, 1 direction pairs, 2 correction vectors)
//!     12     4  dim
//!     16     4  layer
//!     20     8  count
//!     28        count × (8-byte id + payload)
//! ```

use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::atomic_write;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::DirectionPair;

pub const MAGIC: [u8; 4] = *b"THFL";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BundleKind {
    QueryStates,
    DirectionPairs,
    CorrectionVectors,
}

impl BundleKind {
    pub fn code(self) -> u32 {
        match self {
            BundleKind::QueryStates => 0,
            BundleKind::DirectionPairs => 1,
            BundleKind::CorrectionVectors => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(BundleKind::QueryStates),
            1 => Some(BundleKind::DirectionPairs),
            2 => Some(BundleKind::CorrectionVectors),
            _ => None,
        }
    }

    /// Floats per record.
    pub fn payload_len(self, dim: usize) -> usize {
        match self {
            BundleKind::DirectionPairs => 2 * dim,
            _ => dim,
        }
    }

    /// Bytes per record, id included.
    pub fn record_size(self, dim: usize) -> usize {
        8 + 4 * self.payload_len(dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BundleHeader {
    pub kind: BundleKind,
    pub dim: u32,
    pub layer: u32,
    pub count: u64,
}

impl BundleHeader {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&MAGIC);
        out[4..8].copy_from_slice(&VERSION.to_le_bytes());
        out[8..12].copy_from_slice(&self.kind.code().to_le_bytes());
        out[12..16].copy_from_slice(&self.dim.to_le_bytes());
        out[16..20].copy_from_slice(&self.layer.to_le_bytes());
        out[20..28].copy_from_slice(&self.count.to_le_bytes());
        out
    }

    /// Parses a header and checks it against the total byte length of the
    /// file it came from.
    pub fn decode(bytes: &[u8], file_len: u64) -> Result<Self> {
        let n = bytes.len().min(4);
        if bytes[..n] != MAGIC[..n] {
            return Err(Error::Format("bad magic, expected \"THFL\"".into()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Corruption {
                offset: bytes.len() as u64,
                message: format!("header needs {HEADER_LEN} bytes"),
            });
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = u32_at(4);
        if version > VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: VERSION,
            });
        }
        if version == 0 {
            return Err(Error::Format("version 0 is not a valid bundle version".into()));
        }
        let kind = BundleKind::from_code(u32_at(8))
            .ok_or_else(|| Error::Format(format!("unknown bundle kind {}", u32_at(8))))?;
        let dim = u32_at(12);
        if dim == 0 {
            return Err(Error::Format("dim must be positive".into()));
        }
        let layer = u32_at(16);
        let count = u64::from_le_bytes(bytes[20..28].try_into().unwrap());

        let expected = (kind.record_size(dim as usize) as u64)
            .checked_mul(count)
            .and_then(|b| b.checked_add(HEADER_LEN as u64));
        match expected {
            Some(e) if e == file_len => {}
            Some(e) => {
                return Err(Error::Corruption {
                    offset: e.min(file_len),
                    message: format!("header implies {e} bytes, file has {file_len}"),
                })
            }
            None => {
                return Err(Error::Corruption {
                    offset: HEADER_LEN as u64,
                    message: format!("record count {count} overflows the addressable size"),
                })
            }
        }
        Ok(Self {
            kind,
            dim,
            layer,
            count,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub query_id: u64,
    pub payload: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub kind: BundleKind,
    pub dim: usize,
    pub layer: u32,
    pub records: Vec<Record>,
}

impl Bundle {
    /// Checks that every payload matches `kind` and `dim` and is finite.
    pub fn new(kind: BundleKind, dim: usize, layer: u32, records: Vec<Record>) -> Result<Self> {
        validate(kind, dim, &records)?;
        Ok(Self {
            kind,
            dim,
            layer,
            records,
        })
    }

    pub fn header(&self) -> BundleHeader {
        BundleHeader {
            kind: self.kind,
            dim: self.dim as u32,
            layer: self.layer,
            count: self.records.len() as u64,
        }
    }

    pub fn from_pairs(layer: u32, pairs: &[DirectionPair]) -> Result<Self> {
        let dim = pairs
            .first()
            .map(DirectionPair::dim)
            .ok_or_else(|| Error::EmptyDataset("no pairs to bundle".into()))?;
        let records = pairs
            .iter()
            .map(|p| {
                let mut payload = p.h_q.data().to_vec();
                payload.extend_from_slice(p.d_q.data());
                Record {
                    query_id: p.query_id,
                    payload,
                }
            })
            .collect();
        Self::new(BundleKind::DirectionPairs, dim, layer, records)
    }

    /// Kind 0 or 2 bundle from one vector per id.
    pub fn from_vectors(kind: BundleKind, layer: u32, dim: usize, rows: Vec<(u64, Tensor)>) -> Result<Self> {
        if kind == BundleKind::DirectionPairs {
            return Err(Error::Validation("use from_pairs for direction pairs".into()));
        }
        let records = rows
            .into_iter()
            .map(|(query_id, t)| Record {
                query_id,
                payload: t.into_data(),
            })
            .collect();
        Self::new(kind, dim, layer, records)
    }

    pub fn to_pairs(&self) -> Result<Vec<DirectionPair>> {
        self.expect_kind(BundleKind::DirectionPairs)?;
        self.records
            .iter()
            .map(|r| {
                let (h, d) = r.payload.split_at(self.dim);
                DirectionPair::new(r.query_id, Tensor::vector(h.to_vec()), Tensor::vector(d.to_vec()))
            })
            .collect()
    }

    /// Payloads of a kind 0 or 2 bundle as the rows of `[count × dim]`.
    pub fn matrix(&self) -> Result<Tensor> {
        if self.kind == BundleKind::DirectionPairs {
            return Err(Error::Format("direction-pair bundle has two vectors per record".into()));
        }
        let data: Vec<f32> = self.records.iter().flat_map(|r| r.payload.iter().copied()).collect();
        Tensor::new(vec![self.records.len(), self.dim], data)
    }

    pub fn ids(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.query_id).collect()
    }

    pub fn expect_kind(&self, kind: BundleKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!(
                "expected a {kind:?} bundle, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.records.len() * self.kind.record_size(self.dim));
        out.extend_from_slice(&self.header().encode());
        for r in &self.records {
            out.extend_from_slice(&r.query_id.to_le_bytes());
            for x in &r.payload {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let header = BundleHeader::decode(&bytes[..bytes.len().min(HEADER_LEN)], bytes.len() as u64)?;
        decode_records(header, &bytes[HEADER_LEN..])
    }
}

fn validate(kind: BundleKind, dim: usize, records: &[Record]) -> Result<()> {
    if dim == 0 || dim > u32::MAX as usize {
        return Err(Error::Validation(format!("dim {dim} out of range")));
    }
    let want = kind.payload_len(dim);
    for (i, r) in records.iter().enumerate() {
        if r.payload.len() != want {
            return Err(Error::Validation(format!(
                "record {i} has {} floats, kind {kind:?} with dim {dim} needs {want}",
                r.payload.len()
            )));
        }
        if r.payload.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data {
                record: i as u64,
                message: "non-finite value".into(),
            });
        }
    }
    Ok(())
}

fn decode_records(header: BundleHeader, body: &[u8]) -> Result<Bundle> {
    let dim = header.dim as usize;
    let size = header.kind.record_size(dim);
    let mut records = Vec::with_capacity(header.count as usize);
    for (i, chunk) in body.chunks_exact(size).enumerate() {
        let query_id = u64::from_le_bytes(chunk[..8].try_into().unwrap());
        let payload: Vec<f32> = chunk[8..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if payload.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data {
                record: i as u64,
                message: "non-finite value".into(),
            });
        }
        records.push(Record { query_id, payload });
    }
    Ok(Bundle {
        kind: header.kind,
        dim,
        layer: header.layer,
        records,
    })
}

pub fn write_bundle(path: impl AsRef<Path>, bundle: &Bundle) -> Result<()> {
    validate(bundle.kind, bundle.dim, &bundle.records)?;
    atomic_write(path.as_ref(), &bundle.encode())
}

/// Reads and fully validates a bundle. The header is checked against the
/// file length before any record storage is allocated.
pub fn read_bundle(path: impl AsRef<Path>) -> Result<Bundle> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut head = Vec::with_capacity(HEADER_LEN);
    (&mut file)
        .take(HEADER_LEN as u64)
        .read_to_end(&mut head)
        .map_err(|e| Error::io(path, e))?;
    let header = BundleHeader::decode(&head, file_len)?;
    let mut body = Vec::with_capacity((file_len - HEADER_LEN as u64) as usize);
    file.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    if body.len() as u64 != file_len - HEADER_LEN as u64 {
        return Err(Error::Corruption {
            offset: HEADER_LEN as u64 + body.len() as u64,
            message: "file changed while reading".into(),
        });
    }
    decode_records(header, &body)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Bundle {
        Bundle::new(
            BundleKind::QueryStates,
            3,
            12,
            vec![
                Record {
                    query_id: 7,
                    payload: vec![1.0, -2.0, 0.5],
                },
                Record {
                    query_id: 9,
                    payload: vec![0.0, 3.25, -1.0],
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn empty_bundle_is_header_only() {
        let b = Bundle::new(BundleKind::DirectionPairs, 4, 0, vec![]).unwrap();
        assert_eq!(b.encode().len(), 28);
        assert_eq!(Bundle::decode(&b.encode()).unwrap(), b);
    }

    #[test]
    fn record_sizes() {
        assert_eq!(BundleKind::DirectionPairs.record_size(4), 8 + 32);
        assert_eq!(BundleKind::QueryStates.record_size(4), 8 + 16);
        assert_eq!(BundleKind::CorrectionVectors.record_size(4), 8 + 16);
    }

    #[test]
    fn hand_built_bytes_decode() {
        let mut bytes = b"THFL".to_vec();
        for v in [1u32, 0, 3, 12] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&2u64.to_le_bytes());
        for (id, xs) in [(7u64, [1.0f32, -2.0, 0.5]), (9, [0.0, 3.25, -1.0])] {
            bytes.extend_from_slice(&id.to_le_bytes());
            for x in xs {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        assert_eq!(bytes.len(), 28 + 2 * 20);
        let b = Bundle::decode(&bytes).unwrap();
        assert_eq!(b, fixture());
        assert_eq!(b.encode(), bytes);
        assert_eq!(b.matrix().unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = fixture().encode();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(Bundle::decode(&bytes), Err(Error::Format(_))));
        let mut bytes = fixture().encode();
        bytes[4] = 2;
        assert!(matches!(
            Bundle::decode(&bytes),
            Err(Error::UnsupportedVersion { found: 2, supported: 1 })
        ));
        assert!(matches!(Bundle::decode(b"TH"), Err(Error::Corruption { offset: 2, .. })));
    }

    #[test]
    fn truncation_names_offset() {
        let bytes = fixture().encode();
        match Bundle::decode(&bytes[..48]) {
            Err(Error::Corruption { offset, .. }) => assert_eq!(offset, 48),
            other => panic!("expected corruption, got {other:?}"),
        }
        let mut longer = bytes.clone();
        longer.push(0);
        match Bundle::decode(&longer) {
            Err(Error::Corruption { offset, .. }) => assert_eq!(offset, 68),
            other => panic!("expected corruption, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_names_record() {
        let mut bytes = fixture().encode();
        let at = 28 + 20 + 8 + 4;
        bytes[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(Bundle::decode(&bytes), Err(Error::Data { record: 1, .. })));
    }

    #[test]
    fn write_validates_before_touching_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.thfl");
        let mut b = fixture();
        b.records[0].payload.pop();
        assert!(matches!(write_bundle(&path, &b), Err(Error::Validation(_))));
        assert!(!path.exists());
    }

    #[test]
    fn file_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.thfl");
        write_bundle(&path, &fixture()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let back = read_bundle(&path).unwrap();
        assert_eq!(back, fixture());
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn pairs_round_trip() {
        let pairs = vec![
            DirectionPair::new(1, Tensor::vector(vec![1.0, 2.0]), Tensor::vector(vec![3.0, 4.0])).unwrap(),
            DirectionPair::new(5, Tensor::vector(vec![-1.0, 0.0]), Tensor::vector(vec![0.5, 0.25])).unwrap(),
        ];
        let b = Bundle::from_pairs(3, &pairs).unwrap();
        assert_eq!(b.records[0].payload, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(b.to_pairs().unwrap(), pairs);
        assert!(matches!(b.matrix(), Err(Error::Format(_))));
        assert!(matches!(fixture().to_pairs(), Err(Error::Format(_))));
    }
}
