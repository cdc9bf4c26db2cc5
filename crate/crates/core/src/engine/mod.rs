//! Sequential skill learning, open-set inference, evaluation and studies.

mod config;
mod infer;
mod report;
mod study;
mod train;

pub use config::{Method, Mode, RunConfig};
pub use infer::{Inference, Route, SkillEval};
pub use report::{emit_report, forgetting_rate, ReportFormat, RunOutput, RunReport, SkillReport, Timing};
pub use study::{observation_study, spearman, StudyReport};
pub use train::{joint_loss, GateMode, JointLoss, LossWeights, SkillTraining};

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embed::{EmbeddingProvider, HashedNgramEmbedder};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::model::BaseModel;
use crate::skillgen::{generate_stream, SkillSpec, SkillStream};

/// Provider handle shared by every stage of a run.
pub type SharedEmbedder = Arc<dyn EmbeddingProvider + Send + Sync>;

/// A configured run: frozen base model, skill stream and embedding provider.
#[derive(Clone)]
pub struct Engine {
    pub cfg: RunConfig,
    pub model: BaseModel,
    pub stream: SkillStream,
    embedder: SharedEmbedder,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("cfg", &self.cfg)
            .field("embedder", &self.embedder.digest())
            .finish_non_exhaustive()
    }
}

impl Engine {
    /// Generates the stream from `cfg.seed`.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let stream = generate_stream(cfg.seed, &cfg.stream)?;
        Self::with_stream(cfg, stream)
    }

    /// Uses an existing stream; its own configuration replaces `cfg.stream`.
    pub fn with_stream(mut cfg: RunConfig, stream: SkillStream) -> Result<Self> {
        cfg.stream = stream.config.clone();
        cfg.seed = stream.seed;
        cfg.validate()?;
        let model = BaseModel::new(cfg.model, cfg.model_seed)?;
        let embedder = Arc::new(HashedNgramEmbedder::new(cfg.embedding.clone())?);
        Ok(Engine {
            cfg,
            model,
            stream,
            embedder,
        })
    }

    pub fn with_embedder(mut self, embedder: SharedEmbedder) -> Result<Self> {
        if embedder.dim() != self.cfg.embedding.dim {
            return Err(Error::Compatibility(format!(
                "embedding provider has dimension {}, configuration expects {}",
                embedder.dim(),
                self.cfg.embedding.dim
            )));
        }
        self.embedder = embedder;
        Ok(self)
    }

    pub fn embedder(&self) -> &SharedEmbedder {
        &self.embedder
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.embedder.embed(text)?.vector)
    }

    /// `M × d` matrix of a skill's instruction embeddings.
    pub fn corpus(&self, spec: &SkillSpec) -> Result<Mat> {
        let d = self.embedder.dim();
        let mut data = Vec::with_capacity(spec.instructions.len() * d);
        for text in &spec.instructions {
            data.extend(self.embed(text)?);
        }
        Mat::new(spec.instructions.len(), d, data)
    }

    /// Digest of a skill's instruction corpus under the active provider.
    pub fn corpus_digest(&self, spec: &SkillSpec) -> Result<String> {
        let mut joined = self.embedder.digest();
        for text in &spec.instructions {
            joined.push('\n');
            joined.push_str(&self.embedder.embed(text)?.source_digest);
        }
        Ok(crate::embed::hex_sha256(joined.as_bytes()))
    }

    fn rng(&self, stream: u64, index: u64) -> ChaCha8Rng {
        let mut x = self.cfg.seed ^ stream.rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        x = (x ^ (x >> 31)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        ChaCha8Rng::seed_from_u64(x ^ (x >> 29))
    }
}
