//! Synthetic skill streams: token-level primitive chains with paraphrased
//! natural-language instructions.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Episode, TokenLayout, GO, SEP};

/// A token-level transformation over data values `0..m`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    /// `x → x + k`
    Shift(u32),
    /// `x → k − x`
    Map(u32),
    Reverse,
    /// Swaps positions `(0,1), (2,3), …`; an odd tail stays put.
    SwapPairs,
    /// Prepends a copy of the first element.
    RepeatFirst,
}

impl Primitive {
    pub fn is_positional(self) -> bool {
        matches!(self, Primitive::Reverse | Primitive::SwapPairs | Primitive::RepeatFirst)
    }

    pub fn kind(self) -> &'static str {
        match self {
            Primitive::Shift(_) => "shift",
            Primitive::Map(_) => "map",
            Primitive::Reverse => "reverse",
            Primitive::SwapPairs => "swap-pairs",
            Primitive::RepeatFirst => "repeat-first",
        }
    }

    pub fn apply(self, values: &mut Vec<u32>, modulus: u32) {
        match self {
            Primitive::Shift(k) => values.iter_mut().for_each(|v| *v = (*v + k) % modulus),
            Primitive::Map(k) => values
                .iter_mut()
                .for_each(|v| *v = (k % modulus + modulus - *v % modulus) % modulus),
            Primitive::Reverse => values.reverse(),
            Primitive::SwapPairs => values.chunks_exact_mut(2).for_each(|c| c.swap(0, 1)),
            Primitive::RepeatFirst => {
                if let Some(&first) = values.first() {
                    values.insert(0, first);
                }
            }
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Primitive::Shift(k) | Primitive::Map(k) => write!(f, "{}+{k}", self.kind()),
            _ => f.write_str(self.kind()),
        }
    }
}

/// Applies `chain` left to right.
pub fn apply_chain(chain: &[Primitive], input: &[u32], modulus: u32) -> Vec<u32> {
    let mut v = input.to_vec();
    for p in chain {
        p.apply(&mut v, modulus);
    }
    v
}

/// The primitives chains are drawn from.
pub fn primitive_pool() -> Vec<Primitive> {
    vec![
        Primitive::Shift(1),
        Primitive::Shift(2),
        Primitive::Shift(3),
        Primitive::Map(3),
        Primitive::Map(7),
        Primitive::Reverse,
        Primitive::SwapPairs,
        Primitive::RepeatFirst,
    ]
}

/// Chains with the same value map and positional step compute the same
/// function; this key identifies that function.
fn function_key(chain: &[Primitive], modulus: u32) -> (i8, u32, Option<Primitive>) {
    let (mut sign, mut offset) = (1i8, 0u32);
    let mut positional = None;
    for &p in chain {
        match p {
            Primitive::Shift(k) => offset = (offset + k) % modulus,
            Primitive::Map(k) => {
                sign = -sign;
                offset = (k % modulus + modulus - offset) % modulus;
            }
            _ => positional = Some(p),
        }
    }
    (sign, offset, positional)
}

fn chain_is_valid(chain: &[Primitive]) -> bool {
    let count = |f: fn(&Primitive) -> bool| chain.iter().filter(|p| f(p)).count();
    !chain.is_empty()
        && chain.len() <= 3
        && count(|p| p.is_positional()) <= 1
        && count(|p| matches!(p, Primitive::Shift(_))) <= 1
        && count(|p| matches!(p, Primitive::Map(_))) <= 1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub vocab: usize,
    pub n_train_skills: usize,
    pub n_holdout: usize,
    /// Instruction paraphrases per skill.
    pub paraphrases: usize,
    /// Probability that a skill shares a primitive with its predecessor.
    pub overlap_prob: f64,
    pub train_episodes: usize,
    pub eval_episodes: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            vocab: 32,
            n_train_skills: 8,
            n_holdout: 2,
            paraphrases: 8,
            overlap_prob: 0.5,
            train_episodes: 64,
            eval_episodes: 25,
            min_len: 4,
            max_len: 8,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        TokenLayout::new(self.vocab)?;
        if self.n_train_skills < 2 {
            return Err(Error::usage(format!(
                "stream needs at least 2 training skills, got {}",
                self.n_train_skills
            )));
        }
        if self.paraphrases == 0 || self.train_episodes == 0 || self.eval_episodes == 0 {
            return Err(Error::usage("paraphrase and episode counts must be positive"));
        }
        if self.min_len == 0 || self.min_len > self.max_len || self.max_len > 15 {
            return Err(Error::usage(format!(
                "input length range {}..={} must lie within 1..=15",
                self.min_len, self.max_len
            )));
        }
        if !(0.0..=1.0).contains(&self.overlap_prob) {
            return Err(Error::usage(format!("overlap probability {} outside [0, 1]", self.overlap_prob)));
        }
        Ok(())
    }

    pub fn modulus(&self) -> u32 {
        (self.vocab / 2) as u32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillSpec {
    pub skill_id: u32,
    pub name: String,
    /// Applied first to last.
    pub chain: Vec<Primitive>,
    pub instructions: Vec<String>,
    pub holdout: bool,
}

impl SkillSpec {
    pub fn primitives(&self) -> BTreeSet<Primitive> {
        self.chain.iter().copied().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillStream {
    pub seed: u64,
    pub config: StreamConfig,
    /// Training skills in learning order, then holdout skills.
    pub skills: Vec<SkillSpec>,
}

fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn derived_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed ^ stream) ^ index))
}

const NUMBER_WORDS: [&str; 10] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];

fn number<R: Rng>(k: u32, rng: &mut R) -> String {
    match NUMBER_WORDS.get(k as usize) {
        Some(w) if rng.gen_bool(0.5) => (*w).to_string(),
        _ => k.to_string(),
    }
}

fn phrase<R: Rng>(p: Primitive, rng: &mut R) -> String {
    // Each primitive keeps its own vocabulary so paraphrases of one skill
    // stay closer to each other than to other skills.
    let opts: &[&str] = match p {
        Primitive::Shift(_) => &[
            "shift up by {n}",
            "increment by {n}",
            "rotate forward {n}",
            "advance {n} steps",
            "bump values up {n}",
            "add {n} to everything",
            "raise each by {n}",
            "step upward {n} places",
        ],
        Primitive::Map(_) => &[
            "mirror around {n}",
            "reflect about {n}",
            "complement against {n}",
            "negate relative to {n}",
            "mirror values about {n}",
            "subtract each from {n}",
            "reflect through {n}",
            "invert around the pivot {n}",
        ],
        Primitive::Reverse => &[
            "reverse the order",
            "write it backwards",
            "flip front to back",
            "read from the end",
            "reverse it",
            "output in reverse",
            "turn the sequence around",
            "last first, first last",
        ],
        Primitive::SwapPairs => &[
            "swap neighbours",
            "exchange adjacent pairs",
            "pairwise swap",
            "interchange partners",
            "swap each pair",
            "trade places in twos",
            "switch adjacent neighbours",
            "exchange every couple",
        ],
        Primitive::RepeatFirst => &[
            "repeat the first",
            "duplicate the leading one",
            "double the head",
            "echo the opening symbol",
            "repeat the first one",
            "duplicate the head",
            "copy the first to the front",
            "prepend the opening symbol again",
        ],
    };
    let template = *opts.choose(rng).expect("non-empty");
    match p {
        Primitive::Shift(k) | Primitive::Map(k) => template.replace("{n}", &number(k, rng)),
        _ => template.to_string(),
    }
}

fn paraphrase<R: Rng>(chain: &[Primitive], rng: &mut R) -> String {
    const JOINERS: [&str; 3] = [" then ", ", then ", " and then "];
    let mut s = String::new();
    for (i, &p) in chain.iter().enumerate() {
        if i > 0 {
            s.push_str(JOINERS.choose(rng).expect("non-empty"));
        }
        s.push_str(&phrase(p, rng));
    }
    s
}

fn draw_chain<R: Rng>(pool: &[Primitive], rng: &mut R) -> Vec<Primitive> {
    loop {
        let len = rng.gen_range(1..=3usize.min(pool.len()));
        let chain: Vec<Primitive> = pool.choose_multiple(rng, len).copied().collect();
        if chain_is_valid(&chain) {
            return chain;
        }
    }
}

const MAX_ATTEMPTS: usize = 10_000;

/// Draws a stream of `n_train_skills` training skills followed by
/// `n_holdout` held-out skills composed only of primitives the training
/// skills use.
pub fn generate_stream(seed: u64, cfg: &StreamConfig) -> Result<SkillStream> {
    cfg.validate()?;
    let modulus = cfg.modulus();
    let pool = primitive_pool();
    let mut rng = derived_rng(seed, 0x5354_5245, 0);
    let mut chains: Vec<Vec<Primitive>> = Vec::new();
    let mut functions = HashSet::new();

    for t in 0..cfg.n_train_skills {
        let want_overlap = t > 0 && rng.gen_bool(cfg.overlap_prob);
        let mut found = None;
        for _ in 0..MAX_ATTEMPTS {
            let chain = draw_chain(&pool, &mut rng);
            if functions.contains(&function_key(&chain, modulus)) {
                continue;
            }
            if t > 0 {
                let prev: &Vec<Primitive> = &chains[t - 1];
                let overlaps = chain.iter().any(|p| prev.contains(p));
                if overlaps != want_overlap {
                    continue;
                }
            }
            found = Some(chain);
            break;
        }
        let chain = found.ok_or_else(|| Error::usage(format!("could not draw a distinct chain for skill {t}")))?;
        functions.insert(function_key(&chain, modulus));
        chains.push(chain);
    }

    let seen: Vec<Primitive> = pool
        .iter()
        .copied()
        .filter(|p| chains.iter().any(|c| c.contains(p)))
        .collect();
    for h in 0..cfg.n_holdout {
        let mut found = None;
        for _ in 0..MAX_ATTEMPTS {
            let chain = draw_chain(&seen, &mut rng);
            if !functions.contains(&function_key(&chain, modulus)) {
                found = Some(chain);
                break;
            }
        }
        let chain = found.ok_or_else(|| {
            Error::usage(format!("training primitives admit no new composition for holdout {h}"))
        })?;
        functions.insert(function_key(&chain, modulus));
        chains.push(chain);
    }

    let mut used = HashSet::new();
    let mut skills = Vec::with_capacity(chains.len());
    for (i, chain) in chains.into_iter().enumerate() {
        let mut instructions = Vec::with_capacity(cfg.paraphrases);
        let mut attempts = 0;
        while instructions.len() < cfg.paraphrases {
            attempts += 1;
            if attempts > MAX_ATTEMPTS {
                return Err(Error::usage(format!(
                    "cannot produce {} distinct paraphrases for skill {i}",
                    cfg.paraphrases
                )));
            }
            let text = paraphrase(&chain, &mut rng);
            if used.insert(crate::embed::normalize_text(&text)) {
                instructions.push(text);
            }
        }
        let name = chain.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(" > ");
        skills.push(SkillSpec {
            skill_id: i as u32,
            name,
            chain,
            instructions,
            holdout: i >= cfg.n_train_skills,
        });
    }
    Ok(SkillStream {
        seed,
        config: cfg.clone(),
        skills,
    })
}

/// One random episode of `spec`.
pub fn render_episode<R: Rng>(spec: &SkillSpec, cfg: &StreamConfig, rng: &mut R) -> Episode {
    let layout = TokenLayout { vocab: cfg.vocab };
    let modulus = cfg.modulus();
    let len = rng.gen_range(cfg.min_len..=cfg.max_len);
    let input: Vec<u32> = (0..len).map(|_| rng.gen_range(0..modulus)).collect();
    let output = apply_chain(&spec.chain, &input, modulus);
    let instruction = spec
        .instructions
        .choose(rng)
        .cloned()
        .unwrap_or_default();
    let mut prompt = layout.instruction_tokens_for(&instruction);
    prompt.push(SEP);
    prompt.extend(input.iter().map(|&v| layout.data_token(v)));
    prompt.push(GO);
    Episode {
        instruction,
        prompt,
        target: output.iter().map(|&v| layout.data_token(v)).collect(),
    }
}

/// The input values encoded in an episode's prompt.
pub fn episode_input(episode: &Episode, layout: &TokenLayout) -> Vec<u32> {
    let sep = episode.prompt.iter().position(|&t| t == SEP).map_or(0, |p| p + 1);
    episode.prompt[sep..]
        .iter()
        .take_while(|&&t| t != GO)
        .filter_map(|&t| layout.data_value(t))
        .collect()
}

impl SkillStream {
    pub fn training_skills(&self) -> &[SkillSpec] {
        &self.skills[..self.config.n_train_skills]
    }

    pub fn holdout_skills(&self) -> &[SkillSpec] {
        &self.skills[self.config.n_train_skills..]
    }

    /// Deterministic episodes of skill `index`; train and eval draw from
    /// separate seed partitions.
    pub fn episodes(&self, index: usize, split: Split) -> Vec<Episode> {
        let spec = &self.skills[index];
        let (tag, count) = match split {
            Split::Train => (0x5452_4149, self.config.train_episodes),
            Split::Eval => (0x4556_414c, self.config.eval_episodes),
        };
        let mut rng = derived_rng(self.seed, tag, u64::from(spec.skill_id));
        (0..count)
            .map(|_| render_episode(spec, &self.config, &mut rng))
            .collect()
    }

    /// Jaccard overlap of primitive sets; symmetric with unit diagonal.
    pub fn relatedness(&self) -> Vec<Vec<f64>> {
        let sets: Vec<_> = self.skills.iter().map(SkillSpec::primitives).collect();
        sets.iter()
            .map(|a| {
                sets.iter()
                    .map(|b| {
                        let inter = a.intersection(b).count() as f64;
                        let union = a.union(b).count() as f64;
                        inter / union
                    })
                    .collect()
            })
            .collect()
    }

    /// Number of shared primitives between every pair of skills.
    pub fn shared_primitives(&self) -> Vec<Vec<usize>> {
        let sets: Vec<_> = self.skills.iter().map(SkillSpec::primitives).collect();
        sets.iter()
            .map(|a| sets.iter().map(|b| a.intersection(b).count()).collect())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let stream: SkillStream =
            serde_json::from_str(json).map_err(|e| Error::Format(format!("stream document: {e}")))?;
        stream.config.validate()?;
        if stream.skills.len() != stream.config.n_train_skills + stream.config.n_holdout {
            return Err(Error::Format(format!(
                "stream lists {} skills but its config declares {} + {}",
                stream.skills.len(),
                stream.config.n_train_skills,
                stream.config.n_holdout
            )));
        }
        Ok(stream)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
