//! Frozen toy autoregressive model with per-layer adapter injection.
//!
//! Position `i` is encoded as five equal blocks: the running mean of token
//! embeddings up to `i`, plus four fixed reads of the input segment (the
//! tokens between `SEP` and `GO`) addressed by the number `j` of tokens
//! emitted since `GO`: `input[j]`, `input[n-1-j]`, the pair partner
//! `input[j^1]`, and the predecessor `input[max(j,1)-1]`. Reads that fall
//! outside the input are zero vectors. Everything used at position `i`
//! comes from tokens `<= i`.
//!
//! The encoding passes through `L` residual tanh layers
//! `x ← x + tanh((W₀ + g·ΔW) x + b)` and a frozen output head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{LayerShape, MergedAdapter, SkillAdapter};
use crate::error::{Error, Result};
use crate::mat::{self, Mat};
use crate::tape::{NodeId, Op, Tape};

pub const END: usize = 0;
pub const SEP: usize = 1;
pub const GO: usize = 2;
const N_SPECIAL: usize = 3;
const N_CHANNELS: usize = 5;

/// Vocabulary partition: specials, data values, instruction words.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub vocab: usize,
}

impl TokenLayout {
    pub fn new(vocab: usize) -> Result<Self> {
        if vocab < 8 {
            return Err(Error::usage(format!("vocabulary of {vocab} is too small (minimum 8)")));
        }
        Ok(TokenLayout { vocab })
    }

    /// Number of distinct data values.
    pub fn data_alphabet(&self) -> usize {
        self.vocab / 2
    }

    pub fn instruction_tokens(&self) -> usize {
        self.vocab - N_SPECIAL - self.data_alphabet()
    }

    pub fn data_token(&self, value: u32) -> usize {
        debug_assert!((value as usize) < self.data_alphabet());
        N_SPECIAL + value as usize
    }

    pub fn data_value(&self, token: usize) -> Option<u32> {
        (N_SPECIAL..N_SPECIAL + self.data_alphabet())
            .contains(&token)
            .then(|| (token - N_SPECIAL) as u32)
    }

    pub fn word_token(&self, word: &str) -> usize {
        // FNV-1a keeps the word mapping independent of any seed.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in word.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        N_SPECIAL + self.data_alphabet() + (h % self.instruction_tokens() as u64) as usize
    }

    /// Instruction words as token ids (lowercased, punctuation stripped).
    pub fn instruction_tokens_for(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| {
                w.chars()
                    .filter(|c| c.is_alphanumeric())
                    .flat_map(char::to_lowercase)
                    .collect::<String>()
            })
            .filter(|w| !w.is_empty())
            .map(|w| self.word_token(&w))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub vocab: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            vocab: 32,
            hidden: 40,
            layers: 4,
        }
    }
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        TokenLayout::new(self.vocab)?;
        if self.hidden < N_CHANNELS {
            return Err(Error::usage(format!(
                "hidden width {} is below the {N_CHANNELS} input channels",
                self.hidden
            )));
        }
        if self.layers == 0 {
            return Err(Error::usage("model needs at least one layer"));
        }
        Ok(())
    }

    pub fn channel_width(&self) -> usize {
        self.hidden / N_CHANNELS
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        vec![
            LayerShape {
                out_dim: self.hidden,
                in_dim: self.hidden,
            };
            self.layers
        ]
    }
}

/// One training or evaluation sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub instruction: String,
    /// Instruction tokens, `SEP`, input tokens, `GO`.
    pub prompt: Vec<usize>,
    /// Expected output tokens, without the trailing `END`.
    pub target: Vec<usize>,
}

impl Episode {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if let Some(t) = self.prompt.iter().chain(&self.target).find(|&&t| t >= vocab) {
            return Err(Error::usage(format!("token {t} outside vocabulary of {vocab}")));
        }
        Ok(())
    }
}

/// Frozen base parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseModel {
    pub shape: ModelShape,
    pub seed: u64,
    /// `V × channel_width`
    pub embedding: Mat,
    /// `h × h` per layer
    pub weights: Vec<Mat>,
    /// `1 × h` per layer
    pub biases: Vec<Mat>,
    /// `V × h`
    pub head: Mat,
}

/// Per-layer injected update used by a forward pass.
#[derive(Clone, Debug)]
pub enum LayerDelta {
    LowRank { a: Mat, b: Mat },
    Dense(Mat),
}

/// What gets added to the frozen layers. `layers[l] = None` leaves layer `l`
/// untouched.
#[derive(Clone, Debug, Default)]
pub struct Injection {
    pub layers: Vec<Option<(LayerDelta, f64)>>,
}

impl Injection {
    pub fn none() -> Self {
        Injection::default()
    }

    /// A trained adapter with its frozen gate decisions.
    pub fn from_adapter(adapter: &SkillAdapter) -> Self {
        Self::from_adapter_with_gates(
            adapter,
            &adapter
                .gate_decisions
                .iter()
                .map(|&g| if g { 1.0 } else { 0.0 })
                .collect::<Vec<_>>(),
        )
    }

    pub fn from_adapter_with_gates(adapter: &SkillAdapter, gates: &[f64]) -> Self {
        Injection {
            layers: adapter
                .pairs
                .iter()
                .zip(gates)
                .map(|(p, &g)| {
                    Some((
                        LayerDelta::LowRank {
                            a: p.a.clone(),
                            b: p.b.clone(),
                        },
                        g,
                    ))
                })
                .collect(),
        }
    }

    /// Aggregated deltas gated by the top-1 contributor's decisions.
    pub fn from_merged(merged: &MergedAdapter) -> Self {
        Injection {
            layers: merged
                .deltas
                .iter()
                .zip(&merged.top1_gates)
                .map(|(d, &g)| Some((LayerDelta::Dense(d.clone()), if g { 1.0 } else { 0.0 })))
                .collect(),
        }
    }

    fn layer(&self, l: usize) -> Option<&(LayerDelta, f64)> {
        self.layers.get(l).and_then(Option::as_ref)
    }
}

impl BaseModel {
    pub fn new(shape: ModelShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = shape.channel_width();
        let h = shape.hidden;
        let mut uniform = |rows: usize, cols: usize, bound: f64| {
            let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
            Mat::new(rows, cols, data)
        };
        // Unit-variance embeddings; layer weights with variance 1/h.
        let embedding = uniform(shape.vocab, e, 3f64.sqrt())?;
        let wb = (3.0 / h as f64).sqrt();
        let mut weights = Vec::with_capacity(shape.layers);
        let mut biases = Vec::with_capacity(shape.layers);
        for _ in 0..shape.layers {
            weights.push(uniform(h, h, wb)?);
            biases.push(uniform(1, h, 0.1)?);
        }
        let head = uniform(shape.vocab, h, wb)?;
        Ok(BaseModel {
            shape,
            seed,
            embedding,
            weights,
            biases,
            head,
        })
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout {
            vocab: self.shape.vocab,
        }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(t) = tokens.iter().find(|&&t| t >= self.shape.vocab) {
            return Err(Error::usage(format!(
                "token {t} outside vocabulary of {}",
                self.shape.vocab
            )));
        }
        Ok(())
    }

    /// Input encodings for the given positions of `tokens`, one row each.
    pub fn features(&self, tokens: &[usize], positions: &[usize]) -> Result<Mat> {
        self.check_tokens(tokens)?;
        let e = self.shape.channel_width();
        let mut out = Mat::zeros(positions.len().max(1), self.shape.hidden);
        if positions.is_empty() {
            return Err(Error::usage("no positions requested"));
        }
        // Running sums so each position costs O(e).
        let mut prefix = vec![vec![0.0; e]; tokens.len() + 1];
        for (i, &t) in tokens.iter().enumerate() {
            let emb = self.embedding.row(t);
            let next: Vec<f64> = prefix[i].iter().zip(emb).map(|(a, b)| a + b).collect();
            prefix[i + 1] = next;
        }
        for (row, &i) in positions.iter().enumerate() {
            if i >= tokens.len() {
                return Err(Error::usage(format!(
                    "position {i} beyond sequence of length {}",
                    tokens.len()
                )));
            }
            let dst = out.row_mut(row);
            let count = (i + 1) as f64;
            for (d, s) in dst[..e].iter_mut().zip(&prefix[i + 1]) {
                *d = s / count;
            }
            let seen = &tokens[..=i];
            let Some(sep) = seen.iter().position(|&t| t == SEP) else { continue };
            let Some(go_rel) = seen[sep + 1..].iter().position(|&t| t == GO) else { continue };
            let go = sep + 1 + go_rel;
            let input = &seen[sep + 1..go];
            let n = input.len();
            let j = i - go;
            let reads = [
                (j < n).then(|| j),
                (j < n).then(|| n - 1 - j),
                (j < n).then(|| if (j ^ 1) < n { j ^ 1 } else { j }),
                (j <= n && n > 0).then(|| j.max(1) - 1),
            ];
            for (c, idx) in reads.iter().enumerate() {
                if let Some(k) = idx {
                    let start = (c + 1) * e;
                    dst[start..start + e].copy_from_slice(self.embedding.row(input[*k]));
                }
            }
        }
        Ok(out)
    }

    /// Hidden layers and head over precomputed encodings.
    pub fn forward_features(&self, features: &Mat, injection: &Injection) -> Result<Mat> {
        let mut x = features.clone();
        for l in 0..self.shape.layers {
            let mut z = mat::matmul_nt(&x, &self.weights[l])?;
            if let Some((delta, gate)) = injection.layer(l) {
                if *gate != 0.0 {
                    let dz = match delta {
                        LayerDelta::LowRank { a, b } => mat::matmul_nt(&mat::matmul_nt(&x, a)?, b)?,
                        LayerDelta::Dense(d) => mat::matmul_nt(&x, d)?,
                    };
                    z.axpy(*gate, &dz)?;
                }
            }
            let bias = self.biases[l].row(0);
            for r in 0..z.rows() {
                let xr = x.row_mut(r);
                for ((xv, zv), bv) in xr.iter_mut().zip(z.row(r)).zip(bias) {
                    *xv += (zv + bv).tanh();
                }
            }
        }
        mat::matmul_nt(&x, &self.head)
    }

    /// Logits for every position of `tokens` (`len × V`).
    pub fn forward(&self, tokens: &[usize], injection: &Injection) -> Result<Mat> {
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let f = self.features(tokens, &positions)?;
        self.forward_features(&f, injection)
    }

    /// Greedy decoding until `END` or `max_steps` tokens.
    pub fn generate(&self, prompt: &[usize], injection: &Injection, max_steps: usize) -> Result<Vec<usize>> {
        if max_steps == 0 {
            return Err(Error::usage("max_steps must be at least 1"));
        }
        if prompt.is_empty() {
            return Err(Error::usage("empty prompt"));
        }
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_steps {
            let f = self.features(&seq, &[seq.len() - 1])?;
            let logits = self.forward_features(&f, injection)?;
            let next = crate::subspace::argmax(logits.row(0));
            if next == END {
                break;
            }
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }

    /// Encodings and next-token targets for every supervised position of an
    /// episode: from `GO` through the last target token, predicting the
    /// target followed by `END`.
    pub fn supervised_rows(&self, episode: &Episode) -> Result<(Mat, Vec<usize>)> {
        episode.validate(self.shape.vocab)?;
        let mut seq = episode.prompt.clone();
        seq.extend_from_slice(&episode.target);
        let start = episode.prompt.len() - 1;
        let positions: Vec<usize> = (start..seq.len()).collect();
        let mut targets = episode.target.clone();
        targets.push(END);
        Ok((self.features(&seq, &positions)?, targets))
    }

    /// Records the hidden stack and head on `tape`.
    ///
    /// `adapters[l]` is `(a, b, gate)` node ids for layer `l`; `None` skips
    /// injection at that layer.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        features: NodeId,
        adapters: &[Option<(NodeId, NodeId, NodeId)>],
    ) -> Result<NodeId> {
        let mut x = features;
        for l in 0..self.shape.layers {
            let w = tape.constant(self.weights[l].clone());
            let mut z = tape.matmul_nt(x, w)?;
            if let Some(&Some((a, b, gate))) = adapters.get(l) {
                let xa = tape.matmul_nt(x, a)?;
                let xab = tape.matmul_nt(xa, b)?;
                let gated = tape.scalar_mul(gate, xab)?;
                z = tape.add(z, gated)?;
            }
            let bias = tape.constant(self.biases[l].clone());
            let zb = tape.record(Op::AddRowBias, &[z, bias])?;
            let y = tape.record(Op::Tanh, &[zb])?;
            x = tape.add(x, y)?;
        }
        let head = tape.constant(self.head.clone());
        tape.matmul_nt(x, head)
    }
}

/// `−Σ_i log softmax(logits_i)[targets_i]` recorded on the tape.
pub fn nll_loss(tape: &mut Tape, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
    if tape.value(logits).rows() != targets.len() {
        return Err(Error::shape(format!(
            "{} logit rows for {} targets",
            tape.value(logits).rows(),
            targets.len()
        )));
    }
    tape.record(
        Op::SoftmaxCrossEntropy {
            targets: targets.to_vec(),
        },
        &[logits],
    )
}

/// Plain evaluation of the summed negative log-likelihood.
pub fn nll_value(logits: &Mat, targets: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let id = tape.constant(logits.clone());
    let loss = nll_loss(&mut tape, id, targets)?;
    Ok(tape.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::init_first_skill;

    fn model() -> BaseModel {
        BaseModel::new(ModelShape::default(), 17).unwrap()
    }

    fn prompt(m: &BaseModel, input: &[u32]) -> Vec<usize> {
        let l = m.layout();
        let mut p = l.instruction_tokens_for("reverse the list");
        p.push(SEP);
        p.extend(input.iter().map(|&v| l.data_token(v)));
        p.push(GO);
        p
    }

    #[test]
    fn layout_partitions_vocab() {
        let l = TokenLayout::new(32).unwrap();
        assert_eq!(l.data_alphabet(), 16);
        assert_eq!(l.instruction_tokens(), 13);
        assert_eq!(l.data_token(0), 3);
        assert_eq!(l.data_value(18), Some(15));
        assert_eq!(l.data_value(19), None);
        for w in ["shift", "reverse", "pairs"] {
            let t = l.word_token(w);
            assert!((19..32).contains(&t));
        }
        assert!(TokenLayout::new(4).is_err());
    }

    #[test]
    fn zero_adapter_matches_base() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ad = init_first_skill(0, &m.shape.layer_shapes(), 8, &mut rng).unwrap();
        ad.force_gates_on();
        let toks = prompt(&m, &[1, 2, 3, 4]);
        let base = m.forward(&toks, &Injection::none()).unwrap();
        let adapted = m.forward(&toks, &Injection::from_adapter(&ad)).unwrap();
        assert!(base.data().iter().zip(adapted.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn all_zero_gates_match_base() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ad = init_first_skill(0, &m.shape.layer_shapes(), 8, &mut rng).unwrap();
        for p in &mut ad.pairs {
            p.b = Mat::filled(p.b.rows(), p.b.cols(), 0.3);
        }
        let toks = prompt(&m, &[5, 6, 7]);
        let base = m.forward(&toks, &Injection::none()).unwrap();
        let gated = m
            .forward(&toks, &Injection::from_adapter_with_gates(&ad, &[0.0; 4]))
            .unwrap();
        assert_eq!(base, gated);
        let on = m.forward(&toks, &Injection::from_adapter_with_gates(&ad, &[1.0; 4])).unwrap();
        assert_ne!(base, on);
    }

    #[test]
    fn logits_are_causal() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ad = init_first_skill(0, &m.shape.layer_shapes(), 8, &mut rng).unwrap();
        for p in &mut ad.pairs {
            p.b = Mat::filled(p.b.rows(), p.b.cols(), 0.1);
        }
        ad.force_gates_on();
        let inj = Injection::from_adapter(&ad);
        let mut toks = prompt(&m, &[1, 2, 3, 4, 5]);
        toks.extend([m.layout().data_token(9), m.layout().data_token(3)]);
        let base = m.forward(&toks, &inj).unwrap();
        for j in 0..toks.len() {
            let mut perturbed = toks.clone();
            perturbed[j] = (perturbed[j] + 7) % 32;
            let out = m.forward(&perturbed, &inj).unwrap();
            for i in 0..j {
                assert!(
                    base.row(i).iter().zip(out.row(i)).all(|(a, b)| a.to_bits() == b.to_bits()),
                    "position {i} changed when token {j} was perturbed"
                );
            }
        }
    }

    #[test]
    fn reads_follow_emission_count() {
        let m = model();
        let e = m.shape.channel_width();
        let l = m.layout();
        let toks = prompt(&m, &[1, 2, 3]);
        let go = toks.len() - 1;
        let f = m.features(&toks, &[go]).unwrap();
        assert_eq!(&f.row(0)[e..2 * e], m.embedding.row(l.data_token(1)));
        assert_eq!(&f.row(0)[2 * e..3 * e], m.embedding.row(l.data_token(3)));
        assert_eq!(&f.row(0)[3 * e..4 * e], m.embedding.row(l.data_token(2)));
        assert_eq!(&f.row(0)[4 * e..5 * e], m.embedding.row(l.data_token(1)));

        let mut longer = toks.clone();
        longer.extend([l.data_token(0); 3]);
        let f = m.features(&longer, &[go + 3]).unwrap();
        assert!(f.row(0)[e..4 * e].iter().all(|&v| v == 0.0));
        assert_eq!(&f.row(0)[4 * e..5 * e], m.embedding.row(l.data_token(3)));
    }

    #[test]
    fn generation_is_deterministic_and_in_range() {
        let m = model();
        let toks = prompt(&m, &[4, 4, 2, 9]);
        let a = m.generate(&toks, &Injection::none(), 16).unwrap();
        let b = m.generate(&toks, &Injection::none(), 16).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 16);
        assert!(a.iter().all(|&t| t < 32 && t != END));
        assert!(m.generate(&toks, &Injection::none(), 0).is_err());
    }

    #[test]
    fn out_of_range_token_is_usage_error() {
        let m = model();
        assert!(matches!(m.forward(&[1, 40], &Injection::none()), Err(Error::Usage(_))));
    }

    #[test]
    fn nll_uniform_and_confident() {
        let logits = Mat::zeros(3, 32);
        let v = nll_value(&logits, &[0, 5, 9]).unwrap();
        assert!((v - 3.0 * 32f64.ln()).abs() < 1e-12);

        let mut sharp = Mat::zeros(2, 32);
        sharp[(0, 4)] = 60.0;
        sharp[(1, 7)] = 60.0;
        assert!(nll_value(&sharp, &[4, 7]).unwrap() < 1e-20);
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ad = init_first_skill(0, &m.shape.layer_shapes(), 8, &mut rng).unwrap();
        for p in &mut ad.pairs {
            p.b = Mat::filled(p.b.rows(), p.b.cols(), 0.05);
        }
        let gates = [1.0, 0.0, 1.0, 1.0];
        let toks = prompt(&m, &[3, 1, 4, 1, 5]);
        let plain = m
            .forward(&toks, &Injection::from_adapter_with_gates(&ad, &gates))
            .unwrap();

        let positions: Vec<usize> = (0..toks.len()).collect();
        let f = m.features(&toks, &positions).unwrap();
        let mut tape = Tape::new();
        let fid = tape.constant(f);
        let ids: Vec<_> = ad
            .pairs
            .iter()
            .zip(gates)
            .map(|(p, g)| {
                let a = tape.param(p.a.clone());
                let b = tape.param(p.b.clone());
                let g = tape.constant(Mat::scalar(g));
                Some((a, b, g))
            })
            .collect();
        let logits = m.forward_on_tape(&mut tape, fid, &ids).unwrap();
        assert!(tape.value(logits).max_abs_diff(&plain) < 1e-12);
    }
}
