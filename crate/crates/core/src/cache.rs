//! Binary embedding cache (`.embd`).
//!
//! Layout, all integers little-endian:
//!
//! | offset          | size      | field                                   |
//! |-----------------|-----------|-----------------------------------------|
//! | 0               | 4         | magic `EMBD`                            |
//! | 4               | 2         | version (u16, currently 1)              |
//! | 6               | 4         | n, number of rows (u32)                 |
//! | 10              | 4         | d, embedding width (u32)                |
//! | 14              | 4         | m, metadata length in bytes (u32)       |
//! | 18              | m         | metadata, compact UTF-8 JSON            |
//! | 18 + m          | 4·n·d     | payload, row-major f32                  |
//! | 18 + m + 4·n·d  | 8         | XXH64 (seed 0) of every preceding byte  |
//!
//! The metadata object has exactly the keys `encoder_id` (string),
//! `preprocess_hash` (16 lowercase hex digits) and `sample_ids` (array of
//! n strings), serialized in that order without whitespace.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use twox_hash::XxHash64;

use crate::error::{CacheError, Error, Result};

pub const MAGIC: [u8; 4] = *b"EMBD";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 18;
const CHECKSUM_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
    pub sample_ids: Vec<String>,
    pub encoder_id: String,
    pub preprocess_hash: u64,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    encoder_id: String,
    preprocess_hash: String,
    sample_ids: Vec<String>,
}

impl EmbeddingMatrix {
    pub fn new(
        dim: usize,
        data: Vec<f32>,
        sample_ids: Vec<String>,
        encoder_id: impl Into<String>,
        preprocess_hash: u64,
    ) -> Result<Self> {
        let m = Self {
            rows: sample_ids.len(),
            dim,
            data,
            sample_ids,
            encoder_id: encoder_id.into(),
            preprocess_hash,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> std::result::Result<(), CacheError> {
        if self.rows != self.sample_ids.len() {
            return Err(CacheError::Invariant(format!(
                "{} rows but {} sample ids",
                self.rows,
                self.sample_ids.len()
            )));
        }
        if self.data.len() != self.rows * self.dim {
            return Err(CacheError::Invariant(format!(
                "payload has {} values, expected {}x{}",
                self.data.len(),
                self.rows,
                self.dim
            )));
        }
        let mut seen = HashSet::with_capacity(self.rows);
        if let Some(dup) = self.sample_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(CacheError::Invariant(format!("duplicate sample id {dup:?}")));
        }
        Ok(())
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.sample_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect()
    }

    /// Rows for `ids`, in that order, widened to f64.
    pub fn features_for(&self, ids: &[&str]) -> Result<Array2<f64>> {
        let index = self.index();
        let mut x = Array2::zeros((ids.len(), self.dim));
        for (r, id) in ids.iter().enumerate() {
            let &i = index
                .get(id)
                .ok_or_else(|| Error::Validation(format!("no cached embedding for sample {id:?}")))?;
            for (dst, &src) in x.row_mut(r).iter_mut().zip(self.row(i)) {
                *dst = src as f64;
            }
        }
        Ok(x)
    }

    pub fn to_f64(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.rows, self.dim), |(i, j)| self.data[i * self.dim + j] as f64)
    }

    /// Bitwise equality, including metadata. Distinguishes `-0.0` from
    /// `0.0` and compares NaN payloads, unlike `PartialEq`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.rows == other.rows
            && self.dim == other.dim
            && self.sample_ids == other.sample_ids
            && self.encoder_id == other.encoder_id
            && self.preprocess_hash == other.preprocess_hash
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Serialize to the `.embd` byte layout; returns the bytes and checksum.
pub fn encode(m: &EmbeddingMatrix) -> Result<(Vec<u8>, u64)> {
    m.validate()?;
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| CacheError::Invariant(format!("{what} {v} exceeds u32")))
    };
    let meta = serde_json::to_vec(&Metadata {
        encoder_id: m.encoder_id.clone(),
        preprocess_hash: format!("{:016x}", m.preprocess_hash),
        sample_ids: m.sample_ids.clone(),
    })
    .expect("metadata serializes");
    let mut buf = Vec::with_capacity(HEADER_LEN + meta.len() + 4 * m.data.len() + CHECKSUM_LEN);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&to_u32(m.rows, "row count")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(m.dim, "dimension")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(meta.len(), "metadata length")?.to_le_bytes());
    buf.extend_from_slice(&meta);
    for v in &m.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let checksum = XxHash64::oneshot(0, &buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    Ok((buf, checksum))
}

fn le_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn decode(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    if bytes.len() < 4 {
        return Err(CacheError::Checksum(format!("file truncated to {} bytes", bytes.len())).into());
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(CacheError::Magic(magic).into());
    }
    if bytes.len() < HEADER_LEN + CHECKSUM_LEN {
        return Err(CacheError::Checksum(format!("file truncated to {} bytes", bytes.len())).into());
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(CacheError::Version {
            found: version,
            supported: VERSION,
        }
        .into());
    }
    let rows = le_u32(bytes, 6) as usize;
    let dim = le_u32(bytes, 10) as usize;
    let meta_len = le_u32(bytes, 14) as usize;
    let expected = (rows as u128) * (dim as u128) * 4 + (HEADER_LEN + meta_len + CHECKSUM_LEN) as u128;
    if bytes.len() as u128 != expected {
        return Err(CacheError::Checksum(format!(
            "file is {} bytes, header implies {expected}",
            bytes.len()
        ))
        .into());
    }
    let body_end = bytes.len() - CHECKSUM_LEN;
    let stored = u64::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = XxHash64::oneshot(0, &bytes[..body_end]);
    if stored != computed {
        return Err(CacheError::Checksum(format!(
            "stored {stored:016x}, computed {computed:016x}"
        ))
        .into());
    }
    let meta: Metadata = serde_json::from_slice(&bytes[HEADER_LEN..HEADER_LEN + meta_len])
        .map_err(|e| CacheError::Metadata(e.to_string()))?;
    let preprocess_hash = u64::from_str_radix(&meta.preprocess_hash, 16)
        .map_err(|e| CacheError::Metadata(format!("preprocess_hash: {e}")))?;
    let data = bytes[HEADER_LEN + meta_len..body_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let m = EmbeddingMatrix {
        rows,
        dim,
        data,
        sample_ids: meta.sample_ids,
        encoder_id: meta.encoder_id,
        preprocess_hash,
    };
    m.validate()
        .map_err(|e| CacheError::Metadata(e.to_string()))?;
    Ok(m)
}

/// Write `m` to `path` atomically (temp file + rename) and return the
/// checksum.
pub fn write_cache(m: &EmbeddingMatrix, path: &Path) -> Result<u64> {
    let (bytes, checksum) = encode(m)?;
    let tmp = path.with_extension("embd.partial");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(checksum)
}

pub fn read_cache(path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Checksum stored in the trailer of an encoded cache.
pub fn stored_checksum(bytes: &[u8]) -> Option<u64> {
    let tail = bytes.len().checked_sub(CHECKSUM_LEN)?;
    Some(u64::from_le_bytes(bytes[tail..].try_into().ok()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(rows: usize, dim: usize) -> EmbeddingMatrix {
        EmbeddingMatrix::new(
            dim,
            (0..rows * dim).map(|i| i as f32 * 0.5 - 1.0).collect(),
            (0..rows).map(|i| format!("id{i}")).collect(),
            "clip-vit-b32",
            0xdead_beef_0123_4567,
        )
        .unwrap()
    }

    #[test]
    fn payload_size_arithmetic() {
        let m = sample(2, 3);
        let (bytes, _) = encode(&m).unwrap();
        let meta_len = le_u32(&bytes, 14) as usize;
        assert_eq!(bytes.len() - HEADER_LEN - meta_len - CHECKSUM_LEN, 2 * 3 * 4);
    }

    #[test]
    fn round_trip_with_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.embd");
        let m = sample(5, 7);
        let checksum = write_cache(&m, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(stored_checksum(&bytes), Some(checksum));
        let back = read_cache(&path).unwrap();
        assert!(back.bit_eq(&m));
        assert_eq!(back.encoder_id, "clip-vit-b32");
    }

    #[test]
    fn empty_matrix_is_valid() {
        let m = EmbeddingMatrix::new(16, vec![], vec![], "resnet50-penultimate", 1).unwrap();
        let (bytes, _) = encode(&m).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.rows, 0);
        assert_eq!(back.dim, 16);
    }

    #[test]
    fn truncation_is_a_checksum_error() {
        let (bytes, _) = encode(&sample(4, 4)).unwrap();
        for cut in [bytes.len() - 1, bytes.len() - 9, 30, 10] {
            let err = decode(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Cache(CacheError::Checksum(_))), "cut {cut}: {err}");
        }
    }

    #[test]
    fn distinct_error_kinds() {
        let (mut bytes, _) = encode(&sample(1, 2)).unwrap();
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(matches!(decode(&wrong_magic), Err(Error::Cache(CacheError::Magic(_)))));

        let mut wrong_version = bytes.clone();
        wrong_version[4] = 2;
        assert!(matches!(
            decode(&wrong_version),
            Err(Error::Cache(CacheError::Version { found: 2, .. }))
        ));

        let last = bytes.len() - 9;
        bytes[last] ^= 0x40;
        assert!(matches!(decode(&bytes), Err(Error::Cache(CacheError::Checksum(_)))));
    }

    #[test]
    fn same_key_different_data_differs_in_checksum() {
        let a = sample(3, 3);
        let mut b = a.clone();
        b.data[4] += 1.0;
        assert_ne!(encode(&a).unwrap().1, encode(&b).unwrap().1);
    }

    #[test]
    fn refuses_inconsistent_matrix() {
        let mut m = sample(2, 2);
        m.data.pop();
        assert!(matches!(encode(&m), Err(Error::Cache(CacheError::Invariant(_)))));
        let mut dup = sample(2, 2);
        dup.sample_ids[1] = "id0".into();
        assert!(matches!(encode(&dup), Err(Error::Cache(CacheError::Invariant(_)))));
    }

    #[test]
    fn features_follow_requested_order() {
        let m = sample(3, 2);
        let x = m.features_for(&["id2", "id0"]).unwrap();
        assert_eq!(x.row(0).to_vec(), vec![m.row(2)[0] as f64, m.row(2)[1] as f64]);
        assert_eq!(x.row(1).to_vec(), vec![m.row(0)[0] as f64, m.row(0)[1] as f64]);
        assert!(m.features_for(&["nope"]).is_err());
    }
}
