//! Deterministic instruction embeddings.
//!
//! The default provider hashes lowercased character n-grams into `dim`
//! signed buckets and L2-normalises the counts. A file of precomputed
//! vectors can stand in for it through [`EmbeddingProvider`].

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mat::{norm2, Mat};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub ngram_range: (usize, usize),
    pub seed: u64,
    pub normalize: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            dim: 512,
            ngram_range: (2, 4),
            seed: 0x5eed_cafe,
            normalize: true,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.ngram_range;
        if self.dim == 0 {
            return Err(Error::usage("embedding dim must be positive"));
        }
        if lo == 0 || lo > hi {
            return Err(Error::usage(format!("invalid n-gram range ({lo}, {hi})")));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex_sha256(json.as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstructionEmbedding {
    pub vector: Vec<f64>,
    pub source_digest: String,
}

impl InstructionEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Trims, lowercases and collapses internal whitespace runs to one space.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

pub(crate) fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn seeded_hash(bytes: &[u8], seed: u64) -> u64 {
    // FNV-1a over the bytes, then a splitmix finaliser keyed by the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h ^ splitmix64(seed))
}

/// Hashed character n-gram embedding.
pub fn embed(text: &str, cfg: &EmbeddingConfig) -> Result<InstructionEmbedding> {
    cfg.validate()?;
    let norm = normalize_text(text);
    if norm.is_empty() {
        return Err(Error::usage("cannot embed empty instruction"));
    }
    // Pad so word boundaries contribute their own n-grams.
    let chars: Vec<char> = format!(" {norm} ").chars().collect();
    let mut vector = vec![0.0; cfg.dim];
    let (lo, hi) = cfg.ngram_range;
    let mut buf = String::new();
    for n in lo..=hi {
        for window in chars.windows(n) {
            buf.clear();
            buf.extend(window);
            let h = seeded_hash(buf.as_bytes(), cfg.seed);
            let bucket = (h % cfg.dim as u64) as usize;
            let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
            vector[bucket] += sign;
        }
    }
    if cfg.normalize {
        let n = norm2(&vector);
        if n > 0.0 {
            for v in &mut vector {
                *v /= n;
            }
        }
    }
    let mut digest_input = cfg.digest().into_bytes();
    digest_input.push(0);
    digest_input.extend_from_slice(norm.as_bytes());
    Ok(InstructionEmbedding {
        vector,
        source_digest: hex_sha256(&digest_input),
    })
}

/// Stacks `embed(texts[i])` as rows of an `M × dim` matrix.
pub fn embed_corpus(texts: &[impl AsRef<str>], cfg: &EmbeddingConfig) -> Result<Mat> {
    HashedNgramEmbedder::new(cfg.clone())?.embed_corpus(texts)
}

/// Source of instruction embeddings.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<InstructionEmbedding>;

    /// Identifies the provider and its configuration.
    fn digest(&self) -> String;

    fn embed_corpus(&self, texts: &[impl AsRef<str>]) -> Result<Mat>
    where
        Self: Sized,
    {
        if texts.is_empty() {
            return Err(Error::usage("instruction corpus is empty"));
        }
        let mut data = Vec::with_capacity(texts.len() * self.dim());
        for (i, t) in texts.iter().enumerate() {
            let e = self.embed(t.as_ref()).map_err(|e| match e {
                Error::Usage(msg) => Error::usage(format!("instruction {i}: {msg}")),
                other => other,
            })?;
            data.extend_from_slice(&e.vector);
        }
        Mat::new(texts.len(), self.dim(), data)
    }
}

#[derive(Clone, Debug)]
pub struct HashedNgramEmbedder {
    cfg: EmbeddingConfig,
    digest: String,
}

impl HashedNgramEmbedder {
    pub fn new(cfg: EmbeddingConfig) -> Result<Self> {
        cfg.validate()?;
        let digest = cfg.digest();
        Ok(HashedNgramEmbedder { cfg, digest })
    }

    pub fn config(&self) -> &EmbeddingConfig {
        &self.cfg
    }
}

impl EmbeddingProvider for HashedNgramEmbedder {
    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn embed(&self, text: &str) -> Result<InstructionEmbedding> {
        embed(text, &self.cfg)
    }

    fn digest(&self) -> String {
        self.digest.clone()
    }
}

/// Embeddings loaded from a JSON object `{ "instruction": [f64; dim], ... }`.
///
/// Keys are matched after [`normalize_text`].
#[derive(Clone, Debug)]
pub struct PrecomputedEmbeddings {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
    digest: String,
}

impl PrecomputedEmbeddings {
    /// Tolerance on `‖v‖₂ = 1` for loaded vectors.
    pub const NORM_TOL: f64 = 1e-6;

    pub fn from_json(json: &str, dim: usize) -> Result<Self> {
        let raw: BTreeMap<String, Vec<f64>> = serde_json::from_str(json)
            .map_err(|e| Error::Format(format!("embedding file: {e}")))?;
        let mut vectors = BTreeMap::new();
        for (key, v) in raw {
            if v.len() != dim {
                return Err(Error::Compatibility(format!(
                    "embedding for {key:?} has dimension {}, expected {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Format(format!("embedding for {key:?} is not finite")));
            }
            let n = norm2(&v);
            if (n - 1.0).abs() > Self::NORM_TOL {
                return Err(Error::Format(format!(
                    "embedding for {key:?} has norm {n}, expected unit norm"
                )));
            }
            let norm_key = normalize_text(&key);
            if norm_key.is_empty() {
                return Err(Error::Format("embedding file has an empty instruction key".into()));
            }
            vectors.insert(norm_key, v);
        }
        let digest = hex_sha256(serde_json::to_string(&vectors)?.as_bytes());
        Ok(PrecomputedEmbeddings {
            dim,
            vectors,
            digest,
        })
    }

    pub fn load(path: impl AsRef<Path>, dim: usize) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, dim)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

impl EmbeddingProvider for PrecomputedEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<InstructionEmbedding> {
        let key = normalize_text(text);
        if key.is_empty() {
            return Err(Error::usage("cannot embed empty instruction"));
        }
        let vector = self
            .vectors
            .get(&key)
            .ok_or_else(|| Error::usage(format!("no precomputed embedding for {key:?}")))?
            .clone();
        let mut digest_input = self.digest.clone().into_bytes();
        digest_input.push(0);
        digest_input.extend_from_slice(key.as_bytes());
        Ok(InstructionEmbedding {
            vector,
            source_digest: hex_sha256(&digest_input),
        })
    }

    fn digest(&self) -> String {
        self.digest.clone()
    }
}
