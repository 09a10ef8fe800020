//! Named-tensor files: `{prefix}.json` lists `{name, shape, byte_offset,
//! byte_length}` sorted by name, and `{prefix}.bin` holds the little-endian
//! f32 data back to back in that order.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::atomic_write;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
}

pub fn manifest_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, ".json")
}

pub fn blob_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, ".bin")
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Manifest and blob bytes for `tensors`. Names must be unique.
pub fn encode_params<'a, I>(tensors: I) -> Result<(Vec<u8>, Vec<u8>)>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let mut sorted: BTreeMap<&str, &Tensor> = BTreeMap::new();
    for (name, t) in tensors {
        if sorted.insert(name, t).is_some() {
            return Err(Error::Validation(format!("duplicate tensor name {name:?}")));
        }
    }
    let mut manifest = Vec::with_capacity(sorted.len());
    let mut blob = Vec::new();
    for (name, t) in sorted {
        let offset = blob.len() as u64;
        for x in t.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
        manifest.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            byte_offset: offset,
            byte_length: blob.len() as u64 - offset,
        });
    }
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    Ok((json, blob))
}

pub fn decode_params(manifest: &[u8], blob: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let entries: Vec<ManifestEntry> = serde_json::from_slice(manifest)?;
    let mut seen = BTreeSet::new();
    for e in &entries {
        if !seen.insert(e.name.as_str()) {
            return Err(Error::Validation(format!("duplicate tensor name {:?}", e.name)));
        }
    }
    let mut out = BTreeMap::new();
    let mut cursor = 0u64;
    for e in &entries {
        let floats = e
            .shape
            .iter()
            .try_fold(1usize, |acc, &s| acc.checked_mul(s))
            .ok_or_else(|| Error::Format(format!("shape of {:?} overflows", e.name)))?;
        if e.byte_length != 4 * floats as u64 {
            return Err(Error::Corruption {
                offset: e.byte_offset,
                message: format!(
                    "{:?} has shape {:?} but {} bytes",
                    e.name, e.shape, e.byte_length
                ),
            });
        }
        if e.byte_offset != cursor {
            return Err(Error::Corruption {
                offset: e.byte_offset,
                message: format!("{:?} expected at byte {cursor}", e.name),
            });
        }
        let end = cursor + e.byte_length;
        if end > blob.len() as u64 {
            return Err(Error::Corruption {
                offset: blob.len() as u64,
                message: format!("blob ends before {:?} (needs {end} bytes)", e.name),
            });
        }
        let data: Vec<f32> = blob[cursor as usize..end as usize]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        cursor = end;
    }
    if cursor != blob.len() as u64 {
        return Err(Error::Corruption {
            offset: cursor,
            message: format!("blob has {} bytes, manifest covers {cursor}", blob.len()),
        });
    }
    Ok(out)
}

pub fn write_params<'a, I>(prefix: impl AsRef<Path>, tensors: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let prefix = prefix.as_ref();
    let (manifest, blob) = encode_params(tensors)?;
    atomic_write(&blob_path(prefix), &blob)?;
    atomic_write(&manifest_path(prefix), &manifest)
}

pub fn read_params(prefix: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor>> {
    let prefix = prefix.as_ref();
    let mpath = manifest_path(prefix);
    let bpath = blob_path(prefix);
    let manifest = std::fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let blob = std::fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    decode_params(&manifest, &blob)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let a = Tensor::new(vec![2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap();
        let b = Tensor::vector(vec![0.1, 0.2, 0.3]);
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("p");
        write_params(&prefix, [("z.w", &a), ("a.b", &b)]).unwrap();
        let back = read_params(&prefix).unwrap();
        assert_eq!(back.len(), 2);
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back["z.w"]), bits(&a));
        assert_eq!(back["z.w"].shape(), &[2, 2]);
        assert_eq!(back["a.b"], b);
        let manifest: Vec<ManifestEntry> = serde_json::from_slice(&std::fs::read(manifest_path(&prefix)).unwrap()).unwrap();
        assert_eq!(manifest[0].name, "a.b");
        assert_eq!(manifest[1].byte_offset, 12);
    }

    #[test]
    fn empty_map() {
        let (m, b) = encode_params(std::iter::empty()).unwrap();
        assert_eq!(serde_json::from_slice::<Vec<ManifestEntry>>(&m).unwrap(), vec![]);
        assert!(b.is_empty());
        assert!(decode_params(&m, &b).unwrap().is_empty());
    }

    #[test]
    fn two_by_two_is_sixteen_bytes() {
        let t = Tensor::zeros(&[2, 2]);
        let (_, b) = encode_params([("m", &t)]).unwrap();
        assert_eq!(b.len(), 16);
    }

    #[test]
    fn duplicates_rejected() {
        let t = Tensor::zeros(&[1]);
        assert!(matches!(encode_params([("x", &t), ("x", &t)]), Err(Error::Validation(_))));
        let m = br#"[{"name":"x","shape":[1],"byte_offset":0,"byte_length":4},
                     {"name":"x","shape":[1],"byte_offset":4,"byte_length":4}]"#;
        assert!(matches!(decode_params(m, &[0; 8]), Err(Error::Validation(_))));
    }

    #[test]
    fn length_mismatch_is_corruption() {
        let t = Tensor::zeros(&[3]);
        let (m, mut b) = encode_params([("x", &t)]).unwrap();
        b.push(0);
        assert!(matches!(decode_params(&m, &b), Err(Error::Corruption { offset: 12, .. })));
        b.truncate(8);
        assert!(matches!(decode_params(&m, &b), Err(Error::Corruption { .. })));
        let bad = br#"[{"name":"x","shape":[3],"byte_offset":0,"byte_length":8}]"#;
        assert!(matches!(decode_params(bad, &[0; 8]), Err(Error::Corruption { .. })));
    }
}
