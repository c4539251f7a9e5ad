//! Precomputed text embeddings, one row per image id, persisted in a
//! compact little-endian binary file:
//!
//! | offset | size        | field                                  |
//! |--------|-------------|----------------------------------------|
//! | 0      | 4           | magic `GEMB`                           |
//! | 4      | 4           | version (u32) = 1                      |
//! | 8      | 4           | k (u32)                                |
//! | 12     | 4           | N (u32)                                |
//! | 16     | Σ(2 + len)  | N × (u16 id byte length, UTF-8 id)     |
//! | …      | 4·N·k       | f32 matrix, row-major                  |
//!
//! No padding and no trailing bytes.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::descriptions::DescriptionSet;
use crate::error::{Error, Result};
use crate::seeding;

pub const MAGIC: &[u8; 4] = b"GEMB";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    k: usize,
    ids: Vec<String>,
    matrix: Vec<f32>,
    index: HashMap<String, usize>,
}

impl PartialEq for EmbeddingCache {
    fn eq(&self, other: &Self) -> bool {
        self.k == other.k
            && self.ids == other.ids
            && self.matrix.len() == other.matrix.len()
            && self
                .matrix
                .iter()
                .zip(&other.matrix)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl EmbeddingCache {
    /// Assembles a cache from rows already in the desired order.
    pub fn from_rows(k: usize, ids: Vec<String>, matrix: Vec<f32>) -> Result<Self> {
        if k == 0 {
            return Err(Error::Validation("embedding dimension k must be positive".into()));
        }
        if matrix.len() != ids.len() * k {
            return Err(Error::dim(
                "embedding cache",
                format!("{} ids × k={k} needs {} values, got {}", ids.len(), ids.len() * k, matrix.len()),
            ));
        }
        if let Some(pos) = matrix.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite embedding value for image `{}`",
                ids[pos / k]
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(Self { k, ids, matrix, index })
    }

    pub fn k(&self) -> usize {
        self.k
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

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.k..(i + 1) * self.k]
    }

    pub fn row_index(&self, image_id: &str) -> Option<usize> {
        self.index.get(image_id).copied()
    }

    pub fn lookup(&self, image_id: &str) -> Result<&[f32]> {
        self.row_index(image_id)
            .map(|i| self.row(i))
            .ok_or_else(|| Error::NotFound(image_id.to_owned()))
    }

    /// Row widened to `f64` for training.
    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }
}

/// Maps description text to a fixed-width vector.
pub trait TextEncoder: Sync {
    fn encode(&self, image_id: &str, text: &str) -> std::result::Result<Vec<f64>, String>;

    fn name(&self) -> &str {
        "unknown"
    }
}

/// Unit anchor vector for a class; depends only on `(label, k, seed)`.
pub fn class_anchor(label: usize, k: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeding::rng(seed, "class-anchor", label as u64);
    let mut v: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Offline stand-in for a pretrained text encoder.
///
/// Returns the class anchor plus an isotropic Gaussian perturbation keyed by
/// `(text, seed)`, renormalized to unit length. Each coordinate of the
/// perturbation has standard deviation `noise_sigma / √k`, so `noise_sigma`
/// is the expected norm of the perturbation relative to the unit anchor.
pub fn synthetic_encoder(text: &str, class_label: usize, k: usize, noise_sigma: f64, seed: u64) -> Vec<f64> {
    assert!(k >= 2, "synthetic encoder needs k >= 2");
    assert!(noise_sigma >= 0.0, "noise_sigma must be nonnegative");
    let anchor = class_anchor(class_label, k, seed);
    if noise_sigma == 0.0 {
        return anchor;
    }
    let scale = noise_sigma / (k as f64).sqrt();
    let mut rng = seeding::rng(seed, "text-noise", seeding::fnv1a(text.as_bytes()));
    let mut v: Vec<f64> = anchor
        .iter()
        .map(|a| a + scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// [`synthetic_encoder`] bound to a label table.
#[derive(Debug, Clone)]
pub struct SyntheticEncoder {
    labels: HashMap<String, usize>,
    pub k: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticEncoder {
    pub fn new(
        labels: impl IntoIterator<Item = (String, usize)>,
        k: usize,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("synthetic encoder needs k >= 2, got {k}")));
        }
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise sigma must be >= 0, got {noise_sigma}")));
        }
        Ok(Self {
            labels: labels.into_iter().collect(),
            k,
            noise_sigma,
            seed,
        })
    }
}

impl TextEncoder for SyntheticEncoder {
    fn encode(&self, image_id: &str, text: &str) -> std::result::Result<Vec<f64>, String> {
        let label = self
            .labels
            .get(image_id)
            .ok_or_else(|| format!("no class label for `{image_id}`"))?;
        Ok(synthetic_encoder(text, *label, self.k, self.noise_sigma, self.seed))
    }

    fn name(&self) -> &str {
        "synthetic"
    }
}

/// Encodes every description, in image-id order.
pub fn build_cache(set: &DescriptionSet, encoder: &dyn TextEncoder, normalize: bool) -> Result<EmbeddingCache> {
    if set.is_empty() {
        return Err(Error::Validation("cannot build a cache from an empty description set".into()));
    }
    let records: Vec<_> = set.records().collect();
    let encoded: Vec<_> = records
        .par_iter()
        .map(|r| encoder.encode(&r.image_id, &r.text))
        .collect();

    let mut k = None;
    let mut ids = Vec::with_capacity(records.len());
    let mut matrix = Vec::new();
    for (record, row) in records.iter().zip(encoded) {
        let id = &record.image_id;
        let mut row = row.map_err(|message| Error::Provider {
            provider: encoder.name().to_owned(),
            id: id.clone(),
            message,
        })?;
        let expected = *k.get_or_insert(row.len());
        if row.len() != expected || expected == 0 {
            return Err(Error::EncoderDrift {
                id: id.clone(),
                expected,
                got: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("encoder produced non-finite values for `{id}`")));
        }
        if normalize {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::DegenerateEmbedding(id.clone()));
            }
            row.iter_mut().for_each(|x| *x /= norm);
        }
        matrix.extend(row.iter().map(|&v| v as f32));
        ids.push(id.clone());
    }
    EmbeddingCache::from_rows(k.unwrap_or(0), ids, matrix)
}

pub fn encode_cache(cache: &EmbeddingCache) -> Result<Vec<u8>> {
    let index_len: usize = cache.ids.iter().map(|id| 2 + id.len()).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + index_len + 4 * cache.matrix.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let k = u32::try_from(cache.k).map_err(|_| Error::Validation("k exceeds u32".into()))?;
    let n = u32::try_from(cache.len()).map_err(|_| Error::Validation("N exceeds u32".into()))?;
    out.extend_from_slice(&k.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    for id in &cache.ids {
        let len = u16::try_from(id.len())
            .map_err(|_| Error::Validation(format!("image id longer than 65535 bytes: `{id}`")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    for v in &cache.matrix {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_cache(bytes: &[u8]) -> Result<EmbeddingCache> {
    if bytes.len() < 4 {
        return Err(Error::Truncated(format!("{} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}, expected GEMB", &bytes[0..4])));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated(format!("{} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported cache version {version}")));
    }
    let k = word(8) as usize;
    let n = word(12) as usize;
    if k == 0 {
        return Err(Error::Format("k = 0".into()));
    }
    let mut pos = HEADER_LEN;
    let mut ids = Vec::with_capacity(n.min(bytes.len()));
    for i in 0..n {
        let len_bytes = bytes
            .get(pos..pos + 2)
            .ok_or_else(|| Error::Truncated(format!("index entry {i} of {n} cut off")))?;
        let len = u16::from_le_bytes([len_bytes[0], len_bytes[1]]) as usize;
        pos += 2;
        let raw = bytes
            .get(pos..pos + len)
            .ok_or_else(|| Error::Truncated(format!("id {i} of {n} cut off")))?;
        let id = std::str::from_utf8(raw)
            .map_err(|_| Error::Format(format!("id {i} is not valid UTF-8")))?;
        ids.push(id.to_owned());
        pos += len;
    }
    let expected = n
        .checked_mul(k)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::Format("N·k overflows".into()))?;
    let remaining = bytes.len() - pos;
    if remaining != expected {
        return Err(Error::Truncated(format!(
            "matrix of N={n}, k={k} needs {expected} bytes, file has {remaining}"
        )));
    }
    let matrix = bytes[pos..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EmbeddingCache::from_rows(k, ids, matrix)
}

pub fn write_cache(cache: &EmbeddingCache, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_cache(cache)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<EmbeddingCache> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cache(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptions::{build_description_set, PromptKind, StubProvider};

    fn labelled(n_classes: usize, per_class: usize) -> Vec<(String, usize)> {
        (0..n_classes * per_class)
            .map(|i| (format!("img_{i:05}"), i % n_classes))
            .collect()
    }

    fn synthetic_cache(n_classes: usize, per_class: usize, sigma: f64, seed: u64) -> (EmbeddingCache, HashMap<String, usize>) {
        let labels = labelled(n_classes, per_class);
        let ids: Vec<String> = labels.iter().map(|(id, _)| id.clone()).collect();
        let set = build_description_set(&ids, &StubProvider::new(labels.clone()), PromptKind::Long).unwrap();
        let enc = SyntheticEncoder::new(labels.clone(), 16, sigma, seed).unwrap();
        (build_cache(&set, &enc, true).unwrap(), labels.into_iter().collect())
    }

    fn cosine(a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
        let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn synthetic_encoder_is_deterministic() {
        let a = synthetic_encoder("a red bako", 3, 16, 0.3, 9);
        let b = synthetic_encoder("a red bako", 3, 16, 0.3, 9);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(a, synthetic_encoder("a blue bako", 3, 16, 0.3, 9));
    }

    #[test]
    fn zero_noise_returns_the_anchor() {
        let anchor = class_anchor(2, 8, 5);
        assert_eq!(synthetic_encoder("one text", 2, 8, 0.0, 5), anchor);
        assert_eq!(synthetic_encoder("another text", 2, 8, 0.0, 5), anchor);
    }

    #[test]
    fn nearest_anchor_recovers_classes() {
        let (k, sigma, seed) = (16, 0.3, 11);
        let anchors: Vec<Vec<f64>> = (0..10).map(|c| class_anchor(c, k, seed)).collect();
        let mut hits = 0;
        for c in 0..10 {
            for t in 0..25 {
                let v = synthetic_encoder(&format!("text {c} {t}"), c, k, sigma, seed);
                let best = (0..10)
                    .map(|j| (j, v.iter().zip(&anchors[j]).map(|(a, b)| a * b).sum::<f64>()))
                    .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc })
                    .0;
                hits += usize::from(best == c);
            }
        }
        assert!(hits as f64 / 250.0 > 0.95, "hits {hits}");
    }

    #[test]
    fn intra_class_cosine_exceeds_inter_class() {
        let (cache, labels) = synthetic_cache(10, 10, 0.3, 1);
        let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0, 0.0, 0);
        for i in 0..cache.len() {
            for j in (i + 1)..cache.len() {
                let c = cosine(cache.row(i), cache.row(j));
                if labels[&cache.ids()[i]] == labels[&cache.ids()[j]] {
                    intra += c;
                    ni += 1;
                } else {
                    inter += c;
                    nx += 1;
                }
            }
        }
        let gap = intra / ni as f64 - inter / nx as f64;
        assert!(gap > 0.3, "gap {gap}");
    }

    #[test]
    fn normalized_rows_have_unit_norm() {
        let (cache, _) = synthetic_cache(4, 5, 0.5, 2);
        for i in 0..cache.len() {
            let n: f64 = cache.row(i).iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    struct Fixed(Vec<Vec<f64>>);

    impl TextEncoder for Fixed {
        fn encode(&self, image_id: &str, _: &str) -> std::result::Result<Vec<f64>, String> {
            let i: usize = image_id[1..].parse().unwrap();
            Ok(self.0[i].clone())
        }
    }

    fn set_of(n: usize) -> DescriptionSet {
        let ids: Vec<String> = (0..n).map(|i| format!("r{i}")).collect();
        let labels = ids.iter().map(|id| (id.clone(), 0));
        build_description_set(&ids, &StubProvider::new(labels), PromptKind::Short).unwrap()
    }

    #[test]
    fn single_record_cache() {
        let set = set_of(1);
        let raw = build_cache(&set, &Fixed(vec![vec![3.0, 4.0]]), false).unwrap();
        assert_eq!(raw.matrix(), &[3.0, 4.0]);
        let normed = build_cache(&set, &Fixed(vec![vec![3.0, 4.0]]), true).unwrap();
        assert_eq!(normed.len(), 1);
        assert_eq!(normed.matrix(), &[0.6, 0.8]);
    }

    #[test]
    fn dimension_drift_and_zero_rows() {
        let set = set_of(2);
        let drift = build_cache(&set, &Fixed(vec![vec![1.0, 0.0], vec![1.0, 0.0, 0.0]]), true);
        assert!(matches!(drift, Err(Error::EncoderDrift { expected: 2, got: 3, .. })));
        match build_cache(&set, &Fixed(vec![vec![1.0, 0.0], vec![0.0, 0.0]]), true) {
            Err(Error::DegenerateEmbedding(id)) => assert_eq!(id, "r1"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(build_cache(&set, &Fixed(vec![vec![1.0, 0.0], vec![0.0, 0.0]]), false).is_ok());
    }

    #[test]
    fn file_size_arithmetic() {
        let ids: Vec<String> = (0..10).map(|i| format!("img_{i:03}")).collect();
        assert!(ids.iter().all(|id| id.len() == 7));
        let cache = EmbeddingCache::from_rows(8, ids, vec![0.5; 80]).unwrap();
        assert_eq!(encode_cache(&cache).unwrap().len(), 426);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (cache, _) = synthetic_cache(3, 4, 0.3, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.gemb");
        write_cache(&cache, &path).unwrap();
        let back = read_cache(&path).unwrap();
        assert_eq!(back, cache);
        assert_eq!(back.ids(), cache.ids());
    }

    #[test]
    fn wrong_magic_and_version() {
        let cache = EmbeddingCache::from_rows(2, vec!["a".into()], vec![1.0, 0.0]).unwrap();
        let mut bytes = encode_cache(&cache).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_cache(&bytes), Err(Error::Format(_))));
        let mut bytes = encode_cache(&cache).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode_cache(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn inconsistent_length_is_truncation() {
        let cache = EmbeddingCache::from_rows(2, vec!["a".into(), "b".into()], vec![1.0; 4]).unwrap();
        let bytes = encode_cache(&cache).unwrap();
        for cut in [3, 10, 17, bytes.len() - 1] {
            assert!(matches!(decode_cache(&bytes[..cut]), Err(Error::Truncated(_))), "cut {cut}");
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(decode_cache(&longer), Err(Error::Truncated(_))));
    }

    #[test]
    fn duplicate_index_id_is_rejected() {
        let cache = EmbeddingCache::from_rows(1, vec!["a".into(), "b".into()], vec![1.0, 2.0]).unwrap();
        let mut bytes = encode_cache(&cache).unwrap();
        // second id byte: header(16) + len(2) + "a"(1) + len(2)
        bytes[21] = b'a';
        assert!(matches!(decode_cache(&bytes), Err(Error::DuplicateId(id)) if id == "a"));
    }

    #[test]
    fn lookup_present_and_absent() {
        let cache = EmbeddingCache::from_rows(2, vec!["a".into(), "b".into()], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(cache.lookup("b").unwrap(), &[3.0, 4.0]);
        assert!(matches!(cache.lookup("zz"), Err(Error::NotFound(id)) if id == "zz"));
    }

    #[test]
    fn build_is_deterministic() {
        let (a, _) = synthetic_cache(5, 6, 0.3, 8);
        let (b, _) = synthetic_cache(5, 6, 0.3, 8);
        assert_eq!(encode_cache(&a).unwrap(), encode_cache(&b).unwrap());
    }
}
