//! Features of a frozen model, keyed by sample id.
//!
//! File layout (integers little-endian): magic `HLXC`, version u16, reserved
//! u16, 32-byte parameter fingerprint, feature dim u64, entry count u64, then
//! per entry `(id length u32, id bytes, payload offset u64)`, then the HLXT
//! payloads back to back. Offsets count from the start of the payload area.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use super::EncodedDataset;
use crate::error::{HalluxError, Result};
use crate::models::Modality;
use crate::tensor::{read_hlxt, to_hlxt_bytes, Tensor};

const MAGIC: &[u8; 4] = b"HLXC";
const VERSION: u16 = 1;
const BATCH: usize = 32;

/// A model whose features can be cached. Implementations must be pure
/// functions of their parameters, which [`FeatureExtractor::fingerprint`]
/// identifies.
pub trait FeatureExtractor {
    fn fingerprint(&self) -> [u8; 32];
    fn feature_dim(&self) -> usize;
    fn required_modalities(&self) -> Vec<Modality>;
    /// `[B, D]` features from per-modality `[B, H, W, C]` batches.
    fn extract(&self, inputs: &BTreeMap<Modality, Tensor>) -> Result<Tensor>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCache {
    fingerprint: [u8; 32],
    dim: usize,
    ids: Vec<String>,
    features: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl FeatureCache {
    pub fn new(fingerprint: [u8; 32], dim: usize, entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut ids = Vec::with_capacity(entries.len());
        let mut features = Vec::with_capacity(entries.len());
        let mut index = HashMap::with_capacity(entries.len());
        for (id, f) in entries {
            if f.shape() != [dim] {
                return Err(HalluxError::InvalidArgument(format!(
                    "feature for {id} has shape {:?}, cache dim is {dim}",
                    f.shape()
                )));
            }
            if index.insert(id.clone(), ids.len()).is_some() {
                return Err(HalluxError::DuplicateSampleId(id));
            }
            ids.push(id);
            features.push(f);
        }
        Ok(Self { fingerprint, dim, ids, features, index })
    }

    pub fn fingerprint(&self) -> &[u8; 32] {
        &self.fingerprint
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn verify(&self, expected: &[u8; 32]) -> Result<()> {
        if &self.fingerprint != expected {
            return Err(HalluxError::StaleCache {
                cached: hex::encode(self.fingerprint),
                expected: hex::encode(expected),
            });
        }
        Ok(())
    }

    /// Features of `ids` stacked as `[N, D]`, after a fingerprint check.
    pub fn matrix(&self, ids: &[String], expected: &[u8; 32]) -> Result<Tensor> {
        self.verify(expected)?;
        let missing: Vec<&str> = ids.iter().filter(|id| !self.index.contains_key(*id)).map(String::as_str).collect();
        if !missing.is_empty() {
            return Err(HalluxError::MissingCacheEntry(missing.join(", ")));
        }
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for id in ids {
            data.extend_from_slice(self.features[self.index[id]].data());
        }
        Tensor::new(vec![ids.len(), self.dim], data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = Vec::new();
        head.extend_from_slice(MAGIC);
        head.extend_from_slice(&VERSION.to_le_bytes());
        head.extend_from_slice(&0u16.to_le_bytes());
        head.extend_from_slice(&self.fingerprint);
        head.extend_from_slice(&(self.dim as u64).to_le_bytes());
        head.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        let mut payload = Vec::new();
        for (id, f) in self.ids.iter().zip(&self.features) {
            head.extend_from_slice(&(id.len() as u32).to_le_bytes());
            head.extend_from_slice(id.as_bytes());
            head.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            payload.extend_from_slice(&to_hlxt_bytes(f));
        }
        head.extend_from_slice(&payload);
        head
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| HalluxError::Format(format!("feature cache: {m}"));
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        take(2)?;
        let fingerprint: [u8; 32] = take(32)?.try_into().unwrap();
        let dim = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let mut table = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let id = std::str::from_utf8(take(len)?).map_err(|_| bad("id is not UTF-8"))?.to_string();
            let offset = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            table.push((id, offset));
        }
        let payload = &bytes[pos..];
        let entries = table
            .into_iter()
            .map(|(id, off)| {
                let slice = payload.get(off..).ok_or_else(|| bad("offset out of range"))?;
                Ok((id, read_hlxt(slice)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(fingerprint, dim, entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io_util::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Runs `extractor` over `ids` and persists the result to `out`
/// (atomically). Rows keep the order of `ids`.
pub fn cache_features(
    extractor: &dyn FeatureExtractor,
    data: &EncodedDataset,
    ids: &[String],
    out: &Path,
) -> Result<FeatureCache> {
    let rows = data.rows(ids)?;
    for m in extractor.required_modalities() {
        let missing = data.missing(m, &rows);
        if !missing.is_empty() {
            return Err(HalluxError::MissingModality { modality: m.to_string(), ids: missing });
        }
    }
    let dim = extractor.feature_dim();
    let mut entries = Vec::with_capacity(ids.len());
    for chunk in rows.chunks(BATCH) {
        let mut inputs = BTreeMap::new();
        for m in extractor.required_modalities() {
            inputs.insert(m, data.batch(m, chunk)?);
        }
        let feats = extractor.extract(&inputs)?;
        if feats.shape() != [chunk.len(), dim] {
            return Err(HalluxError::InvalidArgument(format!(
                "extractor returned {:?}, expected [{}, {dim}]",
                feats.shape(),
                chunk.len()
            )));
        }
        for (k, &r) in chunk.iter().enumerate() {
            entries.push((data.ids[r].clone(), Tensor::new(vec![dim], feats.data()[k * dim..(k + 1) * dim].to_vec())?));
        }
    }
    let cache = FeatureCache::new(extractor.fingerprint(), dim, entries)?;
    cache.save(out)?;
    Ok(cache)
}

/// Feature of one sample, provided the cache was built by the model with
/// fingerprint `expected`.
pub fn cache_lookup(cache: &FeatureCache, sample_id: &str, expected: &[u8; 32]) -> Result<Tensor> {
    cache.verify(expected)?;
    let i = cache
        .index
        .get(sample_id)
        .ok_or_else(|| HalluxError::MissingCacheEntry(sample_id.to_string()))?;
    Ok(cache.features[*i].clone())
}
