//! Deterministic text-to-vector encoders used for node, edge and global
//! features.
//!
//! [`HashEncoder`] is a signed feature-hashing bag of words: every token is
//! hashed to a bucket and a sign with 64-bit FNV-1a, so identical inputs give
//! bit-identical vectors on every platform. [`TableEncoder`] looks vectors up
//! in a precomputed table, which lets externally produced embeddings replace
//! the hashed ones without touching graph construction.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("no vector for text {0:?} in embedding table")]
    MissingText(String),
    #[error("embedding table line {line}: vector has length {got}, expected {expected}")]
    DimMismatch {
        line: usize,
        got: usize,
        expected: usize,
    },
    #[error("embedding table line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("embedding table {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a, continuing from `state`.
pub fn fnv1a(state: u64, bytes: &[u8]) -> u64 {
    bytes.iter().fold(state, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub dim: usize,
    pub normalize: bool,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            normalize: true,
            seed: 0,
        }
    }
}

/// Anything that turns text into a fixed-width feature vector.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;

    fn encode(&self, text: &str) -> Result<Vec<f64>, EncodeError>;

    /// Encoding of a whole section, used for the virtual global node.
    fn encode_global(&self, section_text: &str) -> Result<Vec<f64>, EncodeError> {
        self.encode(section_text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashEncoder {
    config: EncoderConfig,
}

impl HashEncoder {
    pub fn new(config: EncoderConfig) -> Self {
        assert!(config.dim > 0, "encoder dim must be positive");
        Self { config }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn bucket_and_sign(&self, token: &str) -> (usize, f64) {
        let seeded = fnv1a(FNV_OFFSET, &self.config.seed.to_le_bytes());
        let bucket_hash = fnv1a(seeded, token.as_bytes());
        let sign_hash = fnv1a(bucket_hash, token.as_bytes());
        let bucket = (bucket_hash % self.config.dim as u64) as usize;
        let sign = if sign_hash.count_ones() % 2 == 0 { 1.0 } else { -1.0 };
        (bucket, sign)
    }
}

impl TextEncoder for HashEncoder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>, EncodeError> {
        let mut v = vec![0.0; self.config.dim];
        for token in tokenize(text) {
            let (bucket, sign) = self.bucket_and_sign(&token);
            v[bucket] += sign;
        }
        if self.config.normalize {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            // Tokens can cancel exactly inside a bucket; leave such vectors at zero.
            if norm > 0.0 {
                v.iter_mut().for_each(|x| *x /= norm);
            }
        }
        Ok(v)
    }
}

#[derive(Debug, Deserialize)]
struct TableRecord {
    text: String,
    vector: Vec<f64>,
}

/// Encoder backed by a line-delimited `{"text": ..., "vector": [...]}` table.
///
/// Lookups are keyed by the FNV-1a hash of the exact text.
#[derive(Debug, Clone)]
pub struct TableEncoder {
    dim: usize,
    table: HashMap<u64, Vec<f64>>,
    fallback: Option<HashEncoder>,
}

impl TableEncoder {
    pub fn from_reader<R: BufRead>(reader: R, dim: usize) -> Result<Self, EncodeError> {
        let mut table = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|source| EncodeError::Io {
                path: "<reader>".into(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TableRecord = serde_json::from_str(&line)
                .map_err(|source| EncodeError::Parse { line: i + 1, source })?;
            if rec.vector.len() != dim {
                return Err(EncodeError::DimMismatch {
                    line: i + 1,
                    got: rec.vector.len(),
                    expected: dim,
                });
            }
            table.insert(fnv1a(FNV_OFFSET, rec.text.as_bytes()), rec.vector);
        }
        Ok(Self {
            dim,
            table,
            fallback: None,
        })
    }

    pub fn open(path: impl AsRef<Path>, dim: usize) -> Result<Self, EncodeError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| EncodeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_reader(BufReader::new(file), dim)
    }

    /// Texts missing from the table are encoded by `fallback` instead of
    /// failing.
    pub fn with_fallback(mut self, fallback: HashEncoder) -> Self {
        assert_eq!(fallback.dim(), self.dim, "fallback dim must match table dim");
        self.fallback = Some(fallback);
        self
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl TextEncoder for TableEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>, EncodeError> {
        match self.table.get(&fnv1a(FNV_OFFSET, text.as_bytes())) {
            Some(v) => Ok(v.clone()),
            None => match &self.fallback {
                Some(f) => f.encode(text),
                None => Err(EncodeError::MissingText(text.to_string())),
            },
        }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn enc() -> HashEncoder {
        HashEncoder::new(EncoderConfig::default())
    }

    #[test]
    fn fnv_reference_vectors() {
        // Published FNV-1a 64-bit test vectors.
        assert_eq!(fnv1a(FNV_OFFSET, b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(FNV_OFFSET, b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(FNV_OFFSET, b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(
            tokenize("The Applicant's  appeal—DENIED, 2019."),
            vec!["the", "applicant", "s", "appeal", "denied", "2019"]
        );
        assert!(tokenize(" ,.; ").is_empty());
    }

    #[test]
    fn empty_text_is_zero_vector() {
        let v = enc().encode("").unwrap();
        assert_eq!(v.len(), 32);
        assert!(v.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn shared_tokens_give_higher_cosine() {
        let e = enc();
        let a = e.encode("applicant is canadian").unwrap();
        let b = e.encode("applicant is canadian today").unwrap();
        let c = e.encode("tax assessment appeal").unwrap();
        let near = cosine(&a, &b);
        let far = cosine(&a, &c);
        assert!(near > far, "{near} vs {far}");
        // No bucket collisions at dim 32: 3 shared unit entries over sqrt(3 * 4).
        assert!((near - 0.866_025_403_784_438_6).abs() < 1e-12, "{near}");
        assert!(far.abs() < 1e-12, "{far}");
    }

    #[test]
    fn global_encoding_is_encoding_of_section() {
        let e = enc();
        let s1 = "The applicant is a Canadian.";
        let s2 = "The officer refused the visa.";
        let joined = format!("{s1} {s2}");
        assert_eq!(e.encode_global(&joined).unwrap(), e.encode(&joined).unwrap());
        assert_eq!(e.encode_global(s1).unwrap(), e.encode_global(s1).unwrap());
        assert!(e.encode_global(s1).unwrap().iter().any(|x| *x != 0.0));
    }

    #[test]
    fn seed_changes_hashing() {
        let a = HashEncoder::new(EncoderConfig { seed: 1, ..Default::default() });
        let b = HashEncoder::new(EncoderConfig { seed: 2, ..Default::default() });
        let text = "minister of citizenship and immigration";
        assert_ne!(a.encode(text).unwrap(), b.encode(text).unwrap());
    }

    #[test]
    fn table_encoder_reads_records() {
        let data = "{\"text\": \"applicant\", \"vector\": [1.0, 0.0]}\n\n{\"text\": \"canadian\", \"vector\": [0.0, 1.0]}\n";
        let t = TableEncoder::from_reader(data.as_bytes(), 2).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.encode("applicant").unwrap(), vec![1.0, 0.0]);
        assert!(matches!(t.encode("officer"), Err(EncodeError::MissingText(_))));
        let fb = HashEncoder::new(EncoderConfig { dim: 2, ..Default::default() });
        let t = t.with_fallback(fb.clone());
        assert_eq!(t.encode("officer").unwrap(), fb.encode("officer").unwrap());
    }

    #[test]
    fn table_encoder_rejects_wrong_dim() {
        let data = "{\"text\": \"a\", \"vector\": [1.0]}\n";
        let err = TableEncoder::from_reader(data.as_bytes(), 2).unwrap_err();
        assert!(matches!(err, EncodeError::DimMismatch { line: 1, got: 1, expected: 2 }));
        let err = TableEncoder::from_reader("not json".as_bytes(), 2).unwrap_err();
        assert!(matches!(err, EncodeError::Parse { line: 1, .. }));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn deterministic_and_normalized(text in "\\PC{0,60}") {
            let e = enc();
            let a = e.encode(&text).unwrap();
            let b = e.encode(&text).unwrap();
            prop_assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-9);
            if tokenize(&text).is_empty() {
                prop_assert!(norm == 0.0);
            }
        }
    }
}
