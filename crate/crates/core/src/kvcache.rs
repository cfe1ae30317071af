//! KV storage with cross-layer group sharing, optional per-token FP8 payloads
//! and memory accounting.
//!
//! The cache is organised by *group*, not by layer: every layer maps to one
//! group through a [`GroupMap`], and layers that share a group read the same
//! entries. Writes go through the group, so aliasing costs no extra bytes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::fp8::{dequantize_fp8_token, quantize_fp8_token};
use crate::numerics::{Matrix, Precision};
use crate::swiftkv::{GroupMap, SwiftKvConfig};

/// Bytes used to store one per-vector FP8 scale.
pub const FP8_SCALE_BYTES: u64 = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantization {
    #[default]
    None,
    Fp8PerToken,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccountingMode {
    #[default]
    Normal,
    /// Counts a single layer's worth of KV regardless of depth. Compute is unchanged.
    MergeAllLayers,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CacheConfig {
    pub quantization: Quantization,
    pub accounting: AccountingMode,
    /// Nominal width of an unquantized element, in bytes (2 for 16-bit serving).
    pub element_bytes: u64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self { quantization: Quantization::None, accounting: AccountingMode::Normal, element_bytes: 2 }
    }
}

/// Depth and per-layer KV width; enough to size a cache.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KvGeometry {
    pub num_layers: usize,
    pub d_kv: usize,
}

/// Bytes needed to hold `tokens` positions of KV under the given configuration.
pub fn memory_bytes(cache: &CacheConfig, geometry: KvGeometry, swift: &SwiftKvConfig, tokens: u64) -> u64 {
    let groups = match cache.accounting {
        AccountingMode::Normal => swift.num_kv_groups(geometry.num_layers) as u64,
        AccountingMode::MergeAllLayers => 1,
    };
    tokens * groups * bytes_per_token_group(cache, geometry.d_kv)
}

/// Bytes of one position in one group (K and V together).
pub fn bytes_per_token_group(cache: &CacheConfig, d_kv: usize) -> u64 {
    let d_kv = d_kv as u64;
    match cache.quantization {
        Quantization::None => 2 * d_kv * cache.element_bytes,
        Quantization::Fp8PerToken => 2 * (d_kv + FP8_SCALE_BYTES),
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Stored {
    Raw(Vec<f64>),
    Fp8 { codes: Vec<u8>, scale: f32 },
}

impl Stored {
    fn new(values: &[f64], quantization: Quantization) -> Self {
        match quantization {
            Quantization::None => Stored::Raw(values.to_vec()),
            Quantization::Fp8PerToken => {
                let (codes, scale) = quantize_fp8_token(values);
                Stored::Fp8 { codes, scale }
            }
        }
    }

    fn read_into(&self, out: &mut Vec<f64>) {
        match self {
            Stored::Raw(v) => out.extend_from_slice(v),
            Stored::Fp8 { codes, scale } => out.extend(dequantize_fp8_token(codes, *scale)),
        }
    }

    fn payload_bytes(&self, element_bytes: u64) -> u64 {
        match self {
            Stored::Raw(v) => v.len() as u64 * element_bytes,
            Stored::Fp8 { codes, .. } => codes.len() as u64 + FP8_SCALE_BYTES,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    k: Stored,
    v: Stored,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    map: GroupMap,
    d_kv: usize,
    quantization: Quantization,
    precision: Precision,
    groups: Vec<Vec<Entry>>,
}

impl KvCache {
    pub fn new(map: GroupMap, d_kv: usize, quantization: Quantization, precision: Precision) -> Self {
        let groups = vec![Vec::new(); map.num_groups()];
        Self { map, d_kv, quantization, precision, groups }
    }

    pub fn group_map(&self) -> &GroupMap {
        &self.map
    }

    pub fn quantization(&self) -> Quantization {
        self.quantization
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group_len(&self, group: usize) -> Result<usize> {
        self.groups
            .get(group)
            .map(Vec::len)
            .ok_or_else(|| Error::Cache(format!("no group {group} (cache has {})", self.groups.len())))
    }

    /// Common length of all groups, or `None` while an append sweep is half done.
    pub fn len(&self) -> Option<usize> {
        let first = self.groups.first().map_or(0, Vec::len);
        self.groups.iter().all(|g| g.len() == first).then_some(first)
    }

    pub fn is_empty(&self) -> bool {
        self.groups.iter().all(Vec::is_empty)
    }

    /// Appends K and V for `position`, which must be the next dense slot of `group`.
    pub fn append(&mut self, group: usize, position: usize, k: &[f64], v: &[f64]) -> Result<()> {
        let len = self.group_len(group)?;
        if position != len {
            return Err(Error::Cache(format!("append at position {position} but group {group} holds {len}")));
        }
        if k.len() != self.d_kv || v.len() != self.d_kv {
            return Err(Error::shape(
                "kv append",
                format!("k/v of {}/{} values, expected {}", k.len(), v.len(), self.d_kv),
            ));
        }
        let q = self.quantization;
        self.groups[group].push(Entry { k: Stored::new(k, q), v: Stored::new(v, q) });
        Ok(())
    }

    /// Dequantized K and V for positions `0..up_to` of `group`.
    pub fn read_block(&self, group: usize, up_to: usize) -> Result<(Matrix, Matrix)> {
        let len = self.group_len(group)?;
        if up_to > len {
            return Err(Error::Cache(format!("read of {up_to} positions from group {group} holding {len}")));
        }
        let mut k = Vec::with_capacity(up_to * self.d_kv);
        let mut v = Vec::with_capacity(up_to * self.d_kv);
        for e in &self.groups[group][..up_to] {
            e.k.read_into(&mut k);
            e.v.read_into(&mut v);
        }
        Ok((
            Matrix::from_vec(up_to, self.d_kv, k, self.precision)?,
            Matrix::from_vec(up_to, self.d_kv, v, self.precision)?,
        ))
    }

    /// Reads through a layer index, resolving it to its group.
    pub fn read_layer(&self, layer: usize, up_to: usize) -> Result<(Matrix, Matrix)> {
        self.read_block(self.map.group_of(layer), up_to)
    }

    /// Sum of the payload sizes actually held, with raw values counted at `element_bytes`.
    pub fn stored_bytes(&self, element_bytes: u64) -> u64 {
        self.groups.iter().flatten().map(|e| e.k.payload_bytes(element_bytes) + e.v.payload_bytes(element_bytes)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fp8::FP8_MIN_NORMAL;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vecs(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
        let k = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        (k, v)
    }

    #[test]
    fn append_read_exact_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = KvCache::new(GroupMap::identity(2), 4, Quantization::None, Precision::Double);
        let (k0, v0) = vecs(&mut rng, 4);
        let (k1, v1) = vecs(&mut rng, 4);
        c.append(0, 0, &k0, &v0).unwrap();
        c.append(0, 1, &k1, &v1).unwrap();
        let (k, v) = c.read_block(0, 2).unwrap();
        assert_eq!(k.rows(), 2);
        assert_eq!(k.row(0), &k0[..]);
        assert_eq!(v.row(1), &v1[..]);
        assert_eq!(c.len(), None);

        assert!(c.append(0, 5, &k0, &v0).is_err());
        assert!(c.append(7, 0, &k0, &v0).is_err());
        assert!(c.read_block(0, 3).is_err());
        assert!(c.append(1, 0, &k0[..3], &v0).is_err());
    }

    #[test]
    fn fp8_readback_within_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = KvCache::new(GroupMap::identity(1), 16, Quantization::Fp8PerToken, Precision::Double);
        let mut orig = Vec::new();
        for p in 0..20 {
            let (k, v) = vecs(&mut rng, 16);
            c.append(0, p, &k, &v).unwrap();
            orig.push((k, v));
        }
        let (k, v) = c.read_block(0, 20).unwrap();
        for (p, (ko, vo)) in orig.iter().enumerate() {
            for (stored, original) in [(k.row(p), ko), (v.row(p), vo)] {
                let scale = original.iter().fold(0.0f64, |m, x| m.max(x.abs())) / 448.0;
                for (a, b) in stored.iter().zip(original) {
                    if b.abs() / scale >= FP8_MIN_NORMAL {
                        assert!((a - b).abs() / b.abs() <= 0.0625);
                    }
                }
            }
        }
        assert_eq!(c.stored_bytes(2), 20 * 2 * (16 + 4));
    }

    #[test]
    fn aliased_layers_read_the_same_entries() {
        let map = GroupMap::new(8, 4, 2).unwrap();
        let mut c = KvCache::new(map.clone(), 3, Quantization::None, Precision::Double);
        for g in 0..c.num_groups() {
            c.append(g, 0, &[g as f64; 3], &[1.0; 3]).unwrap();
        }
        assert_eq!(c.read_layer(4, 1).unwrap(), c.read_layer(5, 1).unwrap());
        assert_eq!(c.read_layer(6, 1).unwrap(), c.read_layer(7, 1).unwrap());
        assert_ne!(c.read_layer(5, 1).unwrap(), c.read_layer(6, 1).unwrap());
        assert_eq!(c.num_groups(), 6);
        assert_eq!(c.stored_bytes(2), 6 * 2 * 3 * 2);
    }

    #[test]
    fn memory_formula_cases() {
        let cfg = CacheConfig::default();
        let toy = KvGeometry { num_layers: 8, d_kv: 16 };
        let swift = SwiftKvConfig::new(4, 1);
        assert_eq!(memory_bytes(&cfg, toy, &swift, 10), 10 * 8 * 2 * 16 * 2);

        let desc = KvGeometry { num_layers: 80, d_kv: 1024 };
        let base = SwiftKvConfig::baseline(80);
        let merged = CacheConfig { accounting: AccountingMode::MergeAllLayers, ..cfg };
        assert_eq!(memory_bytes(&cfg, desc, &base, 100), 80 * memory_bytes(&merged, desc, &base, 100));

        let l32 = KvGeometry { num_layers: 32, d_kv: 1024 };
        let r = memory_bytes(&cfg, l32, &SwiftKvConfig::new(16, 4), 1000) as f64
            / memory_bytes(&cfg, l32, &SwiftKvConfig::baseline(32), 1000) as f64;
        assert_eq!(r, 0.625);
    }

    #[test]
    fn clone_is_independent() {
        let mut a = KvCache::new(GroupMap::identity(1), 2, Quantization::None, Precision::Double);
        a.append(0, 0, &[1.0, 2.0], &[3.0, 4.0]).unwrap();
        let mut b = a.clone();
        assert_eq!(a.read_block(0, 1).unwrap(), b.read_block(0, 1).unwrap());
        b.append(0, 1, &[5.0, 6.0], &[7.0, 8.0]).unwrap();
        assert_eq!(a.group_len(0).unwrap(), 1);
        assert_eq!(b.group_len(0).unwrap(), 2);
    }

    #[test]
    fn random_interleavings_match_shadow_lists() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let map = GroupMap::new(6, 2, 3).unwrap();
        let mut caches = vec![KvCache::new(map.clone(), 2, Quantization::None, Precision::Double)];
        type Shadow = Vec<Vec<(Vec<f64>, Vec<f64>)>>;
        let mut shadows: Vec<Shadow> = vec![vec![Vec::new(); map.num_groups()]];
        for _ in 0..100 {
            let which = rng.random_range(0..caches.len());
            if rng.random_bool(0.2) {
                caches.push(caches[which].clone());
                shadows.push(shadows[which].clone());
            } else {
                let g = rng.random_range(0..map.num_groups());
                let (k, v) = vecs(&mut rng, 2);
                let pos = shadows[which][g].len();
                caches[which].append(g, pos, &k, &v).unwrap();
                shadows[which][g].push((k, v));
            }
        }
        for (c, s) in caches.iter().zip(&shadows) {
            for (g, entries) in s.iter().enumerate() {
                let (k, v) = c.read_block(g, entries.len()).unwrap();
                for (p, (ke, ve)) in entries.iter().enumerate() {
                    assert_eq!(k.row(p), &ke[..]);
                    assert_eq!(v.row(p), &ve[..]);
                }
            }
        }
    }
}
