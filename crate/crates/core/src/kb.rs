//! Knowledge-base persistence.
//!
//! File layout:
//!
//! ```text
//! "ABK1" | envelope length (u64 LE) | JSON envelope | blob section
//! ```
//!
//! Blob offsets are relative to the start of the blob section. Every blob
//! is a row-major run of little-endian `f32` values.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{gate_decision, AdapterPair, SkillAdapter};
use crate::embed::EmbeddingConfig;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::subspace::SubspaceProjection;

pub const MAGIC: &[u8; 4] = b"ABK1";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 12;

/// Everything an adapter's meaning depends on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub vocab: usize,
    pub hidden: usize,
    pub layers: usize,
    pub rank: usize,
    pub embed_dim: usize,
    pub base_seed: u64,
}

impl std::fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "V={} h={} L={} r={} d={} base_seed={}",
            self.vocab, self.hidden, self.layers, self.rank, self.embed_dim, self.base_seed
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkillRecord {
    pub skill_id: u32,
    pub name: String,
    /// Digest of the skill's instruction corpus.
    pub instruction_digest: String,
    pub adapter: SkillAdapter,
    pub subspace: SubspaceProjection,
    /// Success rate measured right after the skill was learned.
    pub sr_gt: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeBase {
    pub version: u32,
    pub fingerprint: Fingerprint,
    pub embedding: EmbeddingConfig,
    pub embedding_digest: String,
    /// Training method that produced the records.
    pub method: String,
    pub records: Vec<SkillRecord>,
}

impl KnowledgeBase {
    /// `embedding_digest` identifies the embedding provider; for the hashed
    /// provider it is `embedding.digest()`.
    pub fn new(
        fingerprint: Fingerprint,
        embedding: EmbeddingConfig,
        embedding_digest: impl Into<String>,
        method: impl Into<String>,
    ) -> Self {
        KnowledgeBase {
            version: FORMAT_VERSION,
            fingerprint,
            embedding_digest: embedding_digest.into(),
            embedding,
            method: method.into(),
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, skill_id: u32) -> Option<&SkillRecord> {
        self.records.iter().find(|r| r.skill_id == skill_id)
    }

    fn check_record(&self, record: &SkillRecord) -> Result<()> {
        let fp = &self.fingerprint;
        let ad = &record.adapter;
        ad.check_invariants()?;
        if ad.skill_id != record.skill_id || record.subspace.skill_id != record.skill_id {
            return Err(Error::usage(format!("record {} carries mismatched skill ids", record.skill_id)));
        }
        let layers_ok = ad.layers() == fp.layers
            && ad.pairs.iter().all(|p| {
                p.rank() == fp.rank && p.a.cols() == fp.hidden && p.b.rows() == fp.hidden
            });
        if !layers_ok || record.subspace.dim() != fp.embed_dim {
            return Err(Error::usage(format!(
                "record {} does not match knowledge-base fingerprint {fp}",
                record.skill_id
            )));
        }
        Ok(())
    }

    /// A new knowledge base with `record` appended; `self` is untouched.
    pub fn append_record(&self, record: SkillRecord) -> Result<KnowledgeBase> {
        let mut next = self.clone();
        next.push(record)?;
        Ok(next)
    }

    /// In-place append with the same checks as [`append_record`](Self::append_record).
    pub fn push(&mut self, record: SkillRecord) -> Result<()> {
        if self.record(record.skill_id).is_some() {
            return Err(Error::usage(format!("skill {} already stored", record.skill_id)));
        }
        self.check_record(&record)?;
        self.records.push(record);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding.dim != self.fingerprint.embed_dim {
            return Err(Error::usage("embedding dimension does not match fingerprint"));
        }
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if !seen.insert(r.skill_id) {
                return Err(Error::usage(format!("skill {} stored twice", r.skill_id)));
            }
            self.check_record(r)?;
        }
        Ok(())
    }

    pub fn check_fingerprint(&self, expected: &Fingerprint) -> Result<()> {
        if self.fingerprint != *expected {
            return Err(Error::Compatibility(format!(
                "knowledge base fingerprint [{}] does not match session [{}]",
                self.fingerprint, expected
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut blobs = Vec::new();
        let mut entries = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let mut refs = BTreeMap::new();
            let mut put = |name: String, m: &Mat| {
                let offset = blobs.len() as u64;
                for v in m.data() {
                    blobs.extend_from_slice(&(*v as f32).to_le_bytes());
                }
                refs.insert(
                    name,
                    BlobRef {
                        shape: [m.rows(), m.cols()],
                        offset,
                        length: (m.data().len() * 4) as u64,
                    },
                );
            };
            for (l, p) in r.adapter.pairs.iter().enumerate() {
                put(format!("a.{l}"), &p.a);
                put(format!("b.{l}"), &p.b);
                put(format!("gate_logits.{l}"), &r.adapter.gate_logits[l]);
            }
            put("basis".to_string(), &r.subspace.basis);
            entries.push(RecordEntry {
                meta: RecordMeta {
                    skill_id: r.skill_id,
                    name: r.name.clone(),
                    instruction_digest: r.instruction_digest.clone(),
                    gate_decisions: r.adapter.gate_decisions.clone(),
                    sr_gt: r.sr_gt,
                },
                blobs: refs,
            });
        }
        let envelope = Envelope {
            version: self.version,
            fingerprint: self.fingerprint,
            embedding: self.embedding.clone(),
            embedding_digest: self.embedding_digest.clone(),
            method: self.method.clone(),
            records: entries,
        };
        let json = serde_json::to_vec(&envelope)?;
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + blobs.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blobs);
        Ok(out)
    }

    /// Parses a file image without checking the fingerprint.
    pub fn from_bytes(bytes: &[u8]) -> Result<KnowledgeBase> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing ABK1 magic".into()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Corruption("header truncated".into()));
        }
        let env_len = u64::from_le_bytes(bytes[4..HEADER_LEN].try_into().expect("8 bytes")) as usize;
        let env_end = HEADER_LEN
            .checked_add(env_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Corruption(format!("envelope of {env_len} bytes exceeds file")))?;
        let envelope: Envelope = serde_json::from_slice(&bytes[HEADER_LEN..env_end])
            .map_err(|e| Error::Format(format!("envelope: {e}")))?;
        if envelope.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                envelope.version
            )));
        }
        let section = &bytes[env_end..];
        let mut expected_len = 0u64;
        let mut records = Vec::with_capacity(envelope.records.len());
        for entry in &envelope.records {
            let blob = |name: &str| -> Result<Mat> {
                let r = entry.blobs.get(name).ok_or_else(|| {
                    Error::Format(format!("record {} lacks blob {name}", entry.meta.skill_id))
                })?;
                read_blob(section, name, r)
            };
            let layers = envelope.fingerprint.layers;
            let mut pairs = Vec::with_capacity(layers);
            let mut gate_logits = Vec::with_capacity(layers);
            for l in 0..layers {
                pairs.push(AdapterPair {
                    layer: l,
                    a: blob(&format!("a.{l}"))?,
                    b: blob(&format!("b.{l}"))?,
                });
                gate_logits.push(blob(&format!("gate_logits.{l}"))?);
            }
            expected_len += entry.blobs.values().map(|b| b.length).sum::<u64>();
            if entry.meta.gate_decisions.len() != layers || entry.blobs.len() != 3 * layers + 1 {
                return Err(Error::Format(format!(
                    "record {} does not describe {layers} layers",
                    entry.meta.skill_id
                )));
            }
            records.push(SkillRecord {
                skill_id: entry.meta.skill_id,
                name: entry.meta.name.clone(),
                instruction_digest: entry.meta.instruction_digest.clone(),
                adapter: SkillAdapter {
                    skill_id: entry.meta.skill_id,
                    pairs,
                    gate_logits,
                    gate_decisions: entry.meta.gate_decisions.clone(),
                },
                subspace: SubspaceProjection {
                    skill_id: entry.meta.skill_id,
                    basis: blob("basis")?,
                },
                sr_gt: entry.meta.sr_gt,
            });
        }
        if section.len() as u64 != expected_len {
            return Err(Error::Corruption(format!(
                "blob section holds {} bytes, envelope declares {expected_len}",
                section.len()
            )));
        }
        let kb = KnowledgeBase {
            version: envelope.version,
            fingerprint: envelope.fingerprint,
            embedding: envelope.embedding,
            embedding_digest: envelope.embedding_digest,
            method: envelope.method,
            records,
        };
        kb.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(kb)
    }

    /// Writes atomically: a temporary file in the target directory is
    /// renamed over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        tmp.write_all(&bytes).map_err(|e| Error::io(tmp.path(), e))?;
        tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    /// Loads and checks the fingerprint against the caller's configuration.
    pub fn load(path: impl AsRef<Path>, expected: &Fingerprint) -> Result<KnowledgeBase> {
        let kb = Self::load_unchecked(path)?;
        kb.check_fingerprint(expected)?;
        Ok(kb)
    }

    pub fn load_unchecked(path: impl AsRef<Path>) -> Result<KnowledgeBase> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Gate decisions that disagree with a noise-free refreeze of the
    /// stored logits, as `(skill_id, layer)`.
    pub fn gate_mismatches(&self) -> Vec<(u32, usize)> {
        let mut out = Vec::new();
        for r in &self.records {
            for (l, logits) in r.adapter.gate_logits.iter().enumerate() {
                if gate_decision(logits) != r.adapter.gate_decisions[l] {
                    out.push((r.skill_id, l));
                }
            }
        }
        out
    }

    pub fn summary(&self) -> KbSummary {
        KbSummary {
            version: self.version,
            fingerprint: self.fingerprint,
            embedding_digest: self.embedding_digest.clone(),
            method: self.method.clone(),
            records: self
                .records
                .iter()
                .map(|r| RecordSummary {
                    skill_id: r.skill_id,
                    name: r.name.clone(),
                    instruction_digest: r.instruction_digest.clone(),
                    gates: r
                        .adapter
                        .gate_decisions
                        .iter()
                        .map(|&g| if g { '1' } else { '0' })
                        .collect(),
                    subspace_rank: r.subspace.rank(),
                    delta_norms: r
                        .adapter
                        .deltas()
                        .iter()
                        .map(crate::mat::frobenius_norm)
                        .collect(),
                    sr_gt: r.sr_gt,
                })
                .collect(),
        }
    }
}

fn read_blob(section: &[u8], name: &str, r: &BlobRef) -> Result<Mat> {
    let [rows, cols] = r.shape;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format(format!("blob {name} shape overflows")))?;
    if r.length != (count as u64) * 4 {
        return Err(Error::Format(format!(
            "blob {name}: {} bytes for a {rows}x{cols} matrix",
            r.length
        )));
    }
    let start = r.offset as usize;
    let end = start
        .checked_add(r.length as usize)
        .filter(|&e| e <= section.len())
        .ok_or_else(|| Error::Corruption(format!("blob {name} runs past the end of the file")))?;
    let data = section[start..end]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Mat::new(rows, cols, data).map_err(|e| Error::Corruption(format!("blob {name}: {e}")))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    pub shape: [usize; 2],
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub skill_id: u32,
    pub name: String,
    pub instruction_digest: String,
    pub gate_decisions: Vec<bool>,
    pub sr_gt: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub meta: RecordMeta,
    pub blobs: BTreeMap<String, BlobRef>,
}

/// The JSON header of a knowledge-base file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub version: u32,
    pub fingerprint: Fingerprint,
    pub embedding: EmbeddingConfig,
    pub embedding_digest: String,
    pub method: String,
    pub records: Vec<RecordEntry>,
}

/// Reads just the envelope of a file image, for structural inspection.
pub fn read_envelope(bytes: &[u8]) -> Result<(Envelope, usize)> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing ABK1 header".into()));
    }
    let env_len = u64::from_le_bytes(bytes[4..HEADER_LEN].try_into().expect("8 bytes")) as usize;
    let end = HEADER_LEN + env_len;
    if end > bytes.len() {
        return Err(Error::Corruption("envelope exceeds file".into()));
    }
    let env = serde_json::from_slice(&bytes[HEADER_LEN..end]).map_err(|e| Error::Format(e.to_string()))?;
    Ok((env, end))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordSummary {
    pub skill_id: u32,
    pub name: String,
    pub instruction_digest: String,
    /// One character per layer, `1` = inject.
    pub gates: String,
    pub subspace_rank: usize,
    pub delta_norms: Vec<f64>,
    pub sr_gt: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KbSummary {
    pub version: u32,
    pub fingerprint: Fingerprint,
    pub embedding_digest: String,
    pub method: String,
    pub records: Vec<RecordSummary>,
}

impl std::fmt::Display for KbSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "knowledge base v{} ({})", self.version, self.method)?;
        writeln!(f, "fingerprint: {}", self.fingerprint)?;
        writeln!(f, "embedding:   {}", &self.embedding_digest[..16.min(self.embedding_digest.len())])?;
        writeln!(f, "records:     {}", self.records.len())?;
        for r in &self.records {
            let norms: Vec<String> = r.delta_norms.iter().map(|n| format!("{n:.3}")).collect();
            let sr = r.sr_gt.map_or("-".to_string(), |s| format!("{s:.2}"));
            writeln!(
                f,
                "  [{:>3}] gates={} r_s={} sr_gt={} |dW|=[{}]  {}",
                r.skill_id,
                r.gates,
                r.subspace_rank,
                sr,
                norms.join(", "),
                r.name
            )?;
        }
        Ok(())
    }
}
