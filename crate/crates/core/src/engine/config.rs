use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingConfig;
use crate::error::{Error, Result};
use crate::kb::Fingerprint;
use crate::model::ModelShape;
use crate::skillgen::StreamConfig;

/// Training method, including ablations and baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Full,
    NoGgm,
    NoIna,
    NoSot,
    SeqFt,
    Top1,
    AvgPool,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Full,
        Method::NoGgm,
        Method::NoIna,
        Method::NoSot,
        Method::SeqFt,
        Method::Top1,
        Method::AvgPool,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::NoGgm => "no-ggm",
            Method::NoIna => "no-ina",
            Method::NoSot => "no-sot",
            Method::SeqFt => "seq-ft",
            Method::Top1 => "top1",
            Method::AvgPool => "avg-pool",
        }
    }

    /// Per-layer learned inject/skip gates.
    pub fn gated(self) -> bool {
        !matches!(self, Method::NoGgm | Method::SeqFt)
    }

    /// `A` initialised from prior skills.
    pub fn inherits(self) -> bool {
        !matches!(self, Method::NoIna | Method::SeqFt)
    }

    /// Orthogonality regulariser active.
    pub fn orthogonal(self) -> bool {
        !matches!(self, Method::NoSot | Method::SeqFt)
    }

    /// One adapter carried through the whole stream.
    pub fn sequential(self) -> bool {
        self == Method::SeqFt
    }

    pub fn inference_mode(self) -> Mode {
        match self {
            Method::SeqFt => Mode::Latest,
            Method::Top1 => Mode::Top1,
            Method::AvgPool => Mode::Avg,
            _ => Mode::Aggregate,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown method {s:?}")))
    }
}

/// How stored adapters are combined for a query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Similarity-weighted merge.
    Aggregate,
    /// The single most similar adapter.
    Top1,
    /// Uniform merge.
    Avg,
    /// The most recently stored adapter.
    Latest,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Aggregate => "aggregate",
            Mode::Top1 => "top1",
            Mode::Avg => "avg",
            Mode::Latest => "latest",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Mode::Aggregate, Mode::Top1, Mode::Avg, Mode::Latest]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown inference mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Stream seed; every other random stream derives from it.
    pub seed: u64,
    /// Seed of the frozen base model.
    pub model_seed: u64,
    pub stream: StreamConfig,
    pub model: ModelShape,
    pub embedding: EmbeddingConfig,
    /// Adapter rank `r`.
    pub rank: usize,
    /// Subspace rank `r_s`.
    pub subspace_rank: usize,
    /// Aggregation exponent.
    pub gamma: f64,
    /// Gumbel-softmax temperature.
    pub tau: f64,
    /// Orthogonality weight.
    pub lambda: f64,
    /// Sparsity weight.
    pub lambda_s: f64,
    /// Normalisation epsilon in the orthogonality term.
    pub eps: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub method: Method,
    /// Decode budget per episode.
    pub max_steps: usize,
    pub output_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model_seed: 1234,
            stream: StreamConfig::default(),
            model: ModelShape::default(),
            embedding: EmbeddingConfig::default(),
            rank: 8,
            subspace_rank: 4,
            gamma: 5.0,
            tau: 1.0,
            lambda: 0.1,
            lambda_s: 0.01,
            eps: 0.01,
            lr: 1e-2,
            epochs: 40,
            batch_size: 16,
            method: Method::Full,
            max_steps: 16,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(json).map_err(|e| Error::usage(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        self.model.validate()?;
        self.embedding.validate()?;
        if self.stream.vocab != self.model.vocab {
            return Err(Error::usage(format!(
                "stream vocabulary {} differs from model vocabulary {}",
                self.stream.vocab, self.model.vocab
            )));
        }
        if self.rank == 0 || self.rank > self.model.hidden {
            return Err(Error::usage(format!(
                "adapter rank {} outside 1..={}",
                self.rank, self.model.hidden
            )));
        }
        let max_rs = self.stream.paraphrases.min(self.embedding.dim);
        if self.subspace_rank == 0 || self.subspace_rank > max_rs {
            return Err(Error::usage(format!(
                "subspace rank {} outside 1..={max_rs} (paraphrases per skill: {})",
                self.subspace_rank, self.stream.paraphrases
            )));
        }
        let positive = [
            ("tau", self.tau),
            ("eps", self.eps),
            ("lr", self.lr),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::usage(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("lambda_s", self.lambda_s),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::usage(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 || self.max_steps == 0 {
            return Err(Error::usage("epochs, batch size and max steps must be positive"));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint {
            vocab: self.model.vocab,
            hidden: self.model.hidden,
            layers: self.model.layers,
            rank: self.rank,
            embed_dim: self.embedding.dim,
            base_seed: self.model_seed,
        }
    }
}
