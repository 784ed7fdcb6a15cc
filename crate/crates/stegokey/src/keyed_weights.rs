//! Sparse binary masking and key-seeded weight material.
//!
//! A [`ShapeManifest`] fixes the layout of the backbone's high-capacity
//! (convolution/affine) weight tensors. A [`BinaryMask`] splits every
//! position into the shared region `M` (trainable) and the complement
//! `M̄` (filled at run time). [`generate_key_weights`] turns a 64-bit key
//! into a full Glorot-uniform fill set, and [`assemble`] combines
//! `shared ⊙ M + fill ⊙ M̄` into the effective weights of one task.
//!
//! Masks and fills are never stored: both regenerate bit-identically from
//! `(manifest, alpha, seed)` and `(key, manifest)`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::SeedStream;

/// Layout of one weight tensor.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot_bound(&self) -> f64 {
        (6.0 / (self.fan_in + self.fan_out) as f64).sqrt()
    }
}

/// Ordered list of weight tensors addressed by mask and fills.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ShapeManifest {
    tensors: Vec<TensorSpec>,
}

impl ShapeManifest {
    /// Validates name uniqueness, nonempty dims, positive fans, and fan
    /// consistency for 4-d convolution kernels `[out, in, kh, kw]` and 2-d
    /// affine tensors `[out, in]`.
    pub fn new(tensors: Vec<TensorSpec>) -> Result<Self> {
        if tensors.is_empty() {
            return Err(Error::Parameter("manifest has no tensors".into()));
        }
        let mut names = std::collections::HashSet::new();
        for t in &tensors {
            if !names.insert(t.name.clone()) {
                return Err(Error::Parameter(format!("duplicate tensor name {:?}", t.name)));
            }
            if t.dims.is_empty() || t.dims.iter().any(|&d| d == 0) {
                return Err(Error::Parameter(format!(
                    "tensor {:?} has empty or zero dims {:?}",
                    t.name, t.dims
                )));
            }
            if t.fan_in == 0 || t.fan_out == 0 {
                return Err(Error::Parameter(format!("tensor {:?} has zero fan", t.name)));
            }
            match t.dims.len() {
                4 => {
                    let (o, i, kh, kw) = (t.dims[0], t.dims[1], t.dims[2], t.dims[3]);
                    if t.fan_in != i * kh * kw || t.fan_out != o * kh * kw {
                        return Err(Error::Parameter(format!(
                            "tensor {:?}: fans ({}, {}) inconsistent with conv dims {:?}",
                            t.name, t.fan_in, t.fan_out, t.dims
                        )));
                    }
                }
                2 => {
                    if t.fan_in != t.dims[1] || t.fan_out != t.dims[0] {
                        return Err(Error::Parameter(format!(
                            "tensor {:?}: fans ({}, {}) inconsistent with affine dims {:?}",
                            t.name, t.fan_in, t.fan_out, t.dims
                        )));
                    }
                }
                _ => {}
            }
        }
        Ok(ShapeManifest { tensors })
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

/// Per-tensor 0/1 arrays; 1 marks the shared/trainable region `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    manifest: Arc<ShapeManifest>,
    bits: Vec<Vec<u8>>,
    alpha: f64,
    seed: u64,
}

impl BinaryMask {
    pub fn manifest(&self) -> &Arc<ShapeManifest> {
        &self.manifest
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Bits of tensor `idx`, one byte per weight position.
    pub fn tensor_bits(&self, idx: usize) -> &[u8] {
        &self.bits[idx]
    }

    /// Number of ones (shared positions) in tensor `idx`.
    pub fn ones(&self, idx: usize) -> usize {
        self.bits[idx].iter().map(|&b| b as usize).sum()
    }
}

/// Samples the binary mask `M` for a manifest.
///
/// Each tensor gets exactly `round(alpha * len)` ones, placed by a seeded
/// Fisher-Yates shuffle of the fixed 0/1 multiset, so the sparse ratio is
/// exact and regeneration from `(manifest, alpha, seed)` is bit-identical.
pub fn sample_mask(manifest: &Arc<ShapeManifest>, alpha: f64, seed: u64) -> Result<BinaryMask> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Parameter(format!(
            "sparse ratio alpha must lie in (0, 1], got {alpha}"
        )));
    }
    let root = SeedStream::new(seed);
    let bits = manifest
        .tensors()
        .iter()
        .enumerate()
        .map(|(idx, spec)| {
            let n = spec.len();
            let ones = (alpha * n as f64).round() as usize;
            let mut v = vec![0u8; n];
            for b in v.iter_mut().take(ones) {
                *b = 1;
            }
            root.substream(idx as u64).shuffle(&mut v);
            v
        })
        .collect();
    Ok(BinaryMask {
        manifest: Arc::clone(manifest),
        bits,
        alpha,
        seed,
    })
}

/// Provenance of a weight set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WeightOrigin {
    /// Produced or updated by training.
    Trained,
    /// Deterministically generated from a key.
    KeySeeded { key: u64 },
    /// Result of `assemble`; records where the complement came from.
    Assembled { fill: Box<WeightOrigin> },
}

impl std::fmt::Display for WeightOrigin {
    /// Key values are intentionally omitted so origins can be logged.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WeightOrigin::Trained => write!(f, "trained"),
            WeightOrigin::KeySeeded { .. } => write!(f, "key-seeded"),
            WeightOrigin::Assembled { fill } => write!(f, "assembled(fill={fill})"),
        }
    }
}

/// Per-tensor weight values laid out by a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    manifest: Arc<ShapeManifest>,
    tensors: Vec<Vec<f64>>,
    origin: WeightOrigin,
}

impl WeightSet {
    /// Wraps explicit tensor data; rejects length mismatches and non-finite
    /// values.
    pub fn from_tensors(
        manifest: &Arc<ShapeManifest>,
        tensors: Vec<Vec<f64>>,
        origin: WeightOrigin,
    ) -> Result<Self> {
        if tensors.len() != manifest.len() {
            return Err(Error::Shape(format!(
                "weight set has {} tensors, manifest has {}",
                tensors.len(),
                manifest.len()
            )));
        }
        for (spec, data) in manifest.tensors().iter().zip(&tensors) {
            if data.len() != spec.len() {
                return Err(Error::Shape(format!(
                    "tensor {:?}: expected {} values, got {}",
                    spec.name,
                    spec.len(),
                    data.len()
                )));
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parameter(format!(
                    "tensor {:?} contains non-finite values",
                    spec.name
                )));
            }
        }
        Ok(WeightSet {
            manifest: Arc::clone(manifest),
            tensors,
            origin,
        })
    }

    pub fn zeros(manifest: &Arc<ShapeManifest>, origin: WeightOrigin) -> Self {
        let tensors = manifest.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        WeightSet {
            manifest: Arc::clone(manifest),
            tensors,
            origin,
        }
    }

    pub fn manifest(&self) -> &Arc<ShapeManifest> {
        &self.manifest
    }

    pub fn origin(&self) -> &WeightOrigin {
        &self.origin
    }

    pub fn tensor(&self, idx: usize) -> &[f64] {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.tensors[idx]
    }

    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.tensors
    }
}

/// Deterministic Glorot-uniform fill set for `key`.
///
/// Tensor `t`, element `k` is drawn from the counter-based stream
/// `SeedStream(key).substream(t)` at counter `k`, scaled into
/// `[-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`. Values depend only
/// on `(key, manifest)`.
pub fn generate_key_weights(key: u64, manifest: &Arc<ShapeManifest>) -> WeightSet {
    let root = SeedStream::new(key);
    let tensors = manifest
        .tensors()
        .iter()
        .enumerate()
        .map(|(idx, spec)| {
            let stream = root.substream(idx as u64);
            let bound = spec.glorot_bound();
            (0..spec.len())
                .map(|k| stream.symmetric_f64(k as u64, bound))
                .collect()
        })
        .collect();
    WeightSet {
        manifest: Arc::clone(manifest),
        tensors,
        origin: WeightOrigin::KeySeeded { key },
    }
}

/// Effective weights `shared ⊙ M + fill ⊙ M̄`.
///
/// Every position takes its value from exactly one side, decided by the
/// mask bit, so the combination is bit-exact.
pub fn assemble(shared: &WeightSet, mask: &BinaryMask, fill: &WeightSet) -> Result<WeightSet> {
    if shared.manifest() != mask.manifest() || fill.manifest() != mask.manifest() {
        return Err(Error::Shape(
            "assemble: shared, mask, and fill must agree on the manifest".into(),
        ));
    }
    let tensors = shared
        .tensors
        .iter()
        .zip(&fill.tensors)
        .zip(&mask.bits)
        .map(|((s, f), m)| {
            s.iter()
                .zip(f)
                .zip(m)
                .map(|((&sv, &fv), &bit)| if bit == 1 { sv } else { fv })
                .collect()
        })
        .collect();
    Ok(WeightSet {
        manifest: Arc::clone(shared.manifest()),
        tensors,
        origin: WeightOrigin::Assembled {
            fill: Box::new(fill.origin.clone()),
        },
    })
}

/// One user's `(k_embed, k_recover)` seed pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyPair {
    /// 1-based position in the registry.
    pub index: usize,
    pub embed_key: u64,
    pub recover_key: u64,
}

/// The registered key pairs. All `2K` key values are pairwise distinct.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyRegistry {
    pairs: Vec<KeyPair>,
}

impl KeyRegistry {
    pub fn new(pairs: Vec<(u64, u64)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Parameter("key registry needs at least one pair".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for &(e, r) in &pairs {
            if !seen.insert(e) || !seen.insert(r) {
                return Err(Error::Parameter(
                    "key registry values must be pairwise distinct".into(),
                ));
            }
        }
        Ok(KeyRegistry {
            pairs: pairs
                .into_iter()
                .enumerate()
                .map(|(i, (embed_key, recover_key))| KeyPair {
                    index: i + 1,
                    embed_key,
                    recover_key,
                })
                .collect(),
        })
    }

    /// Derives `k` pairwise-distinct pairs from one master seed.
    pub fn derive(seed: u64, k: usize) -> Result<Self> {
        let stream = SeedStream::new(seed).substream(0x4b45_5953); // "KEYS"
        let mut values = Vec::with_capacity(2 * k);
        let mut counter = 0u64;
        while values.len() < 2 * k {
            let v = stream.value(counter);
            counter += 1;
            if !values.contains(&v) {
                values.push(v);
            }
        }
        Self::new(values.chunks(2).map(|c| (c[0], c[1])).collect())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pair for a 1-based key index.
    pub fn pair(&self, index: usize) -> Result<&KeyPair> {
        if index == 0 || index > self.pairs.len() {
            return Err(Error::KeyIndex {
                index,
                count: self.pairs.len(),
            });
        }
        Ok(&self.pairs[index - 1])
    }

    pub fn iter(&self) -> impl Iterator<Item = &KeyPair> {
        self.pairs.iter()
    }

    /// True if `value` equals any registered embed or recover key.
    pub fn contains_value(&self, value: u64) -> bool {
        self.pairs
            .iter()
            .any(|p| p.embed_key == value || p.recover_key == value)
    }

    /// All registered key values (embed and recover, in registry order).
    pub fn all_values(&self) -> Vec<u64> {
        self.pairs
            .iter()
            .flat_map(|p| [p.embed_key, p.recover_key])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_manifest() -> Arc<ShapeManifest> {
        Arc::new(
            ShapeManifest::new(vec![
                TensorSpec {
                    name: "a".into(),
                    dims: vec![4, 2, 3, 3],
                    fan_in: 2 * 9,
                    fan_out: 4 * 9,
                },
                TensorSpec {
                    name: "b".into(),
                    dims: vec![1000],
                    fan_in: 10,
                    fan_out: 10,
                },
            ])
            .unwrap(),
        )
    }

    #[test]
    fn mask_alpha_one_is_all_ones() {
        let m = toy_manifest();
        let mask = sample_mask(&m, 1.0, 3).unwrap();
        for i in 0..m.len() {
            assert!(mask.tensor_bits(i).iter().all(|&b| b == 1));
        }
    }

    #[test]
    fn mask_half_of_1000_is_exactly_500() {
        let m = toy_manifest();
        let mask = sample_mask(&m, 0.5, 11).unwrap();
        assert_eq!(mask.ones(1), 500);
    }

    #[test]
    fn mask_is_deterministic() {
        let m = toy_manifest();
        let a = sample_mask(&m, 0.7, 42).unwrap();
        let b = sample_mask(&m, 0.7, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mask_rejects_bad_alpha() {
        let m = toy_manifest();
        assert!(sample_mask(&m, 0.0, 1).is_err());
        assert!(sample_mask(&m, 1.5, 1).is_err());
        assert!(sample_mask(&m, -0.1, 1).is_err());
    }

    #[test]
    fn mask_exact_count_per_tensor() {
        let m = toy_manifest();
        for &alpha in &[0.1, 0.25, 0.5, 0.7, 0.9, 0.999] {
            let mask = sample_mask(&m, alpha, 9).unwrap();
            for (i, spec) in m.tensors().iter().enumerate() {
                let expect = (alpha * spec.len() as f64).round() as usize;
                assert_eq!(mask.ones(i), expect, "alpha {alpha} tensor {i}");
            }
        }
    }

    #[test]
    fn key_weights_are_deterministic() {
        let m = toy_manifest();
        assert_eq!(generate_key_weights(7, &m), generate_key_weights(7, &m));
    }

    #[test]
    fn different_keys_differ() {
        let m = toy_manifest();
        let a = generate_key_weights(1, &m);
        let b = generate_key_weights(2, &m);
        let max_diff = a
            .tensors()
            .iter()
            .zip(b.tensors())
            .flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs()))
            .fold(0.0f64, f64::max);
        assert!(max_diff > 0.0);
    }

    #[test]
    fn key_weights_respect_glorot_bound() {
        let m = toy_manifest();
        let w = generate_key_weights(0xdead_beef, &m);
        for (spec, data) in m.tensors().iter().zip(w.tensors()) {
            let bound = spec.glorot_bound();
            assert!(data.iter().all(|v| v.abs() <= bound));
            // and actually uses the range rather than collapsing near zero
            assert!(data.iter().any(|v| v.abs() > bound / 2.0));
        }
    }

    #[test]
    fn hundred_distinct_keys_give_distinct_sets() {
        let m = toy_manifest();
        let sets: Vec<WeightSet> = (0..100).map(|k| generate_key_weights(k * 31 + 5, &m)).collect();
        for i in 0..sets.len() {
            for j in (i + 1)..sets.len() {
                assert_ne!(sets[i].tensors(), sets[j].tensors(), "{i} vs {j}");
            }
        }
    }

    #[test]
    fn assemble_all_ones_returns_shared() {
        let m = toy_manifest();
        let shared = generate_key_weights(100, &m);
        let fill = generate_key_weights(200, &m);
        let mask = sample_mask(&m, 1.0, 0).unwrap();
        let out = assemble(&shared, &mask, &fill).unwrap();
        assert_eq!(out.tensors(), shared.tensors());
    }

    #[test]
    fn assemble_matches_elementwise_oracle() {
        let m = toy_manifest();
        let shared = generate_key_weights(100, &m);
        let fill = generate_key_weights(200, &m);
        let mask = sample_mask(&m, 0.6, 8).unwrap();
        let out = assemble(&shared, &mask, &fill).unwrap();
        for t in 0..m.len() {
            let (s, f, bits, o) = (shared.tensor(t), fill.tensor(t), mask.tensor_bits(t), out.tensor(t));
            for p in 0..s.len() {
                let expect = s[p] * bits[p] as f64 + f[p] * (1.0 - bits[p] as f64);
                assert_eq!(o[p].to_bits(), expect.to_bits(), "tensor {t} pos {p}");
            }
        }
    }

    #[test]
    fn assemble_is_idempotent() {
        let m = toy_manifest();
        let shared = generate_key_weights(1, &m);
        let fill = generate_key_weights(2, &m);
        let mask = sample_mask(&m, 0.4, 3).unwrap();
        let once = assemble(&shared, &mask, &fill).unwrap();
        let twice = assemble(&once, &mask, &fill).unwrap();
        assert_eq!(once.tensors(), twice.tensors());
    }

    #[test]
    fn assemble_rejects_foreign_manifest() {
        let m = toy_manifest();
        let other = Arc::new(
            ShapeManifest::new(vec![TensorSpec {
                name: "a".into(),
                dims: vec![3],
                fan_in: 1,
                fan_out: 1,
            }])
            .unwrap(),
        );
        let shared = generate_key_weights(1, &m);
        let fill = generate_key_weights(2, &other);
        let mask = sample_mask(&m, 0.5, 0).unwrap();
        assert!(assemble(&shared, &mask, &fill).is_err());
    }

    #[test]
    fn registry_rejects_duplicates() {
        assert!(KeyRegistry::new(vec![(1, 2), (3, 1)]).is_err());
        assert!(KeyRegistry::new(vec![(5, 5)]).is_err());
        assert!(KeyRegistry::new(vec![]).is_err());
    }

    #[test]
    fn registry_indexing_is_one_based() {
        let reg = KeyRegistry::new(vec![(10, 20), (30, 40)]).unwrap();
        assert_eq!(reg.pair(1).unwrap().embed_key, 10);
        assert_eq!(reg.pair(2).unwrap().recover_key, 40);
        assert!(reg.pair(0).is_err());
        assert!(reg.pair(3).is_err());
    }

    #[test]
    fn derived_registry_is_distinct_and_stable() {
        let a = KeyRegistry::derive(77, 6).unwrap();
        let b = KeyRegistry::derive(77, 6).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
    }

    #[test]
    fn manifest_rejects_bad_specs() {
        assert!(ShapeManifest::new(vec![]).is_err());
        // duplicate names
        let dup = vec![
            TensorSpec { name: "x".into(), dims: vec![2], fan_in: 1, fan_out: 1 },
            TensorSpec { name: "x".into(), dims: vec![3], fan_in: 1, fan_out: 1 },
        ];
        assert!(ShapeManifest::new(dup).is_err());
        // inconsistent conv fans
        let bad = vec![TensorSpec {
            name: "k".into(),
            dims: vec![4, 2, 3, 3],
            fan_in: 7,
            fan_out: 4 * 9,
        }];
        assert!(ShapeManifest::new(bad).is_err());
    }
}
