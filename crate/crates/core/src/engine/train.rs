use rand::seq::SliceRandom;
use rand::Rng;

use super::{Engine, Method, RunOutput};
use crate::adapter::{inherit_shared, init_first_skill, orthogonality_regularizer, sparsity_penalty, SkillAdapter};
use crate::error::{Error, Result};
use crate::kb::{KnowledgeBase, SkillRecord};
use crate::mat::Mat;
use crate::model::{nll_loss, BaseModel};
use crate::skillgen::Split;
use crate::subspace::{aggregation_weights, build_subspace, AggregationWeights};
use crate::tape::{gumbel_from_uniform, Adam, NodeId, Tape};

const RNG_INIT: u64 = 0x494e_4954;
const RNG_SHUFFLE: u64 = 0x5348_5546;
const RNG_GUMBEL: u64 = 0x474d_424c;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub lambda_s: f64,
    pub eps: f64,
}

/// What the gate node passes forward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    /// Hard decision forward, soft gradient backward.
    StraightThrough,
    /// Soft probability both ways.
    Soft,
}

/// Node handles of one recorded joint loss.
#[derive(Clone, Debug)]
pub struct JointLoss {
    pub total: NodeId,
    /// NLL averaged over target tokens.
    pub nll: NodeId,
    pub a: Vec<NodeId>,
    pub b: Vec<NodeId>,
    /// Gate logit parameters; empty when gating is off.
    pub logits: Vec<NodeId>,
    pub hard: Vec<bool>,
}

/// Records `nll/tokens + λ·R + λ_s·L_s` for `adapter` on a batch.
///
/// `gating = None` pins every gate to 1 and drops the sparsity term.
/// Otherwise `noise[l]` is the Gumbel pair for layer `l`.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss(
    tape: &mut Tape,
    model: &BaseModel,
    features: &Mat,
    targets: &[usize],
    adapter: &SkillAdapter,
    gating: Option<(GateMode, &[[f64; 2]], f64)>,
    priors: &[Vec<Mat>],
    weights: &LossWeights,
) -> Result<JointLoss> {
    let layers = model.shape.layers;
    if adapter.layers() != layers {
        return Err(Error::shape(format!(
            "adapter has {} layers, model has {layers}",
            adapter.layers()
        )));
    }
    if let Some((_, noise, _)) = gating {
        if noise.len() != layers {
            return Err(Error::shape(format!("{} noise pairs for {layers} layers", noise.len())));
        }
    }
    let f = tape.constant(features.clone());
    let mut out = JointLoss {
        total: f,
        nll: f,
        a: Vec::with_capacity(layers),
        b: Vec::with_capacity(layers),
        logits: Vec::new(),
        hard: Vec::new(),
    };
    let mut soft = Vec::new();
    let mut injected = Vec::with_capacity(layers);
    for l in 0..layers {
        let a = tape.param(adapter.pairs[l].a.clone());
        let b = tape.param(adapter.pairs[l].b.clone());
        let gate = match gating {
            None => tape.constant(Mat::scalar(1.0)),
            Some((mode, noise, tau)) => {
                let logits = tape.param(adapter.gate_logits[l].clone());
                let g = tape.st_gumbel_gate(logits, noise[l], tau)?;
                out.logits.push(logits);
                out.hard.push(g.hard);
                soft.push(g.soft);
                match mode {
                    GateMode::StraightThrough => g.gate,
                    GateMode::Soft => g.soft,
                }
            }
        };
        out.a.push(a);
        out.b.push(b);
        injected.push(Some((a, b, gate)));
    }
    let logits = model.forward_on_tape(tape, f, &injected)?;
    let summed = nll_loss(tape, logits, targets)?;
    out.nll = tape.scale(summed, 1.0 / targets.len().max(1) as f64)?;
    let mut terms = vec![out.nll];
    if weights.lambda > 0.0 && !priors.is_empty() {
        let r = orthogonality_regularizer(tape, &out.b, priors, weights.eps)?;
        terms.push(tape.scale(r, weights.lambda)?);
    }
    if !soft.is_empty() && weights.lambda_s > 0.0 {
        let s = sparsity_penalty(tape, &soft)?;
        terms.push(tape.scale(s, weights.lambda_s)?);
    }
    out.total = tape.add_all(&terms)?;
    Ok(out)
}

/// Outcome of training one skill.
#[derive(Clone, Debug)]
pub struct SkillTraining {
    pub adapter: SkillAdapter,
    /// Per-step NLL (per target token).
    pub nll: Vec<f64>,
    /// Per-step joint loss.
    pub total: Vec<f64>,
    pub steps_per_epoch: usize,
}

impl SkillTraining {
    pub fn initial_loss(&self) -> f64 {
        self.nll.first().copied().unwrap_or(f64::NAN)
    }

    fn epoch_mean(&self, epoch: usize) -> f64 {
        let chunk = &self.nll[epoch * self.steps_per_epoch..(epoch + 1) * self.steps_per_epoch];
        chunk.iter().sum::<f64>() / chunk.len() as f64
    }

    pub fn first_epoch_loss(&self) -> f64 {
        self.epoch_mean(0)
    }

    pub fn final_epoch_loss(&self) -> f64 {
        self.epoch_mean(self.nll.len() / self.steps_per_epoch - 1)
    }
}

fn stack_rows(parts: &[&(Mat, Vec<usize>)]) -> Result<(Mat, Vec<usize>)> {
    let cols = parts[0].0.cols();
    let rows: usize = parts.iter().map(|p| p.0.rows()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    let mut targets = Vec::with_capacity(rows);
    for (m, t) in parts {
        data.extend_from_slice(m.data());
        targets.extend_from_slice(t);
    }
    Ok((Mat::new(rows, cols, data)?, targets))
}

impl Engine {
    pub fn loss_weights(&self, method: Method) -> LossWeights {
        LossWeights {
            lambda: if method.orthogonal() { self.cfg.lambda } else { 0.0 },
            lambda_s: self.cfg.lambda_s,
            eps: self.cfg.eps,
        }
    }

    /// Ω over the stored skills for a new skill's instruction corpus: each
    /// subspace is scored by the mean similarity of the corpus rows.
    pub fn inheritance_weights(&self, kb: &KnowledgeBase, corpus: &Mat) -> Result<AggregationWeights> {
        let mut sims = Vec::with_capacity(kb.len());
        for r in &kb.records {
            let mut total = 0.0;
            for i in 0..corpus.rows() {
                total += r.subspace.similarity(corpus.row(i))?;
            }
            sims.push(total / corpus.rows() as f64);
        }
        aggregation_weights(&sims, self.cfg.gamma)
    }

    /// Initial adapter for training skill `index` given the knowledge so far.
    pub fn initial_adapter(&self, kb: &KnowledgeBase, index: usize, corpus: &Mat) -> Result<SkillAdapter> {
        let method = self.cfg.method;
        let id = self.stream.skills[index].skill_id;
        let mut adapter = if method.sequential() && !kb.is_empty() {
            let mut prev = kb.records.last().expect("non-empty").adapter.clone();
            prev.skill_id = id;
            prev
        } else if method.inherits() && !kb.is_empty() {
            let omega = self.inheritance_weights(kb, corpus)?;
            let priors: Vec<&SkillAdapter> = kb.records.iter().map(|r| &r.adapter).collect();
            inherit_shared(id, &priors, &omega)?
        } else {
            let mut rng = self.rng(RNG_INIT, index as u64);
            init_first_skill(id, &self.cfg.model.layer_shapes(), self.cfg.rank, &mut rng)?
        };
        if !method.gated() {
            adapter.force_gates_on();
        }
        Ok(adapter)
    }

    /// Optimises `adapter` on the training episodes of skill `index`.
    pub fn train_skill(&self, index: usize, mut adapter: SkillAdapter, priors: &[Vec<Mat>]) -> Result<SkillTraining> {
        let method = self.cfg.method;
        let weights = self.loss_weights(method);
        let rows = self
            .stream
            .episodes(index, Split::Train)
            .iter()
            .map(|e| self.model.supervised_rows(e))
            .collect::<Result<Vec<_>>>()?;
        let layers = self.cfg.model.layers;
        let mut order: Vec<usize> = (0..rows.len()).collect();
        let mut shuffle = self.rng(RNG_SHUFFLE, index as u64);
        let mut gumbel = self.rng(RNG_GUMBEL, index as u64);
        let mut adam = Adam::new(self.cfg.lr);
        let steps_per_epoch = rows.len().div_ceil(self.cfg.batch_size);
        let mut nll = Vec::with_capacity(steps_per_epoch * self.cfg.epochs);
        let mut total = Vec::with_capacity(nll.capacity());
        for _ in 0..self.cfg.epochs {
            order.shuffle(&mut shuffle);
            for batch in order.chunks(self.cfg.batch_size) {
                let parts: Vec<_> = batch.iter().map(|&i| &rows[i]).collect();
                let (features, targets) = stack_rows(&parts)?;
                let noise: Vec<[f64; 2]> = (0..layers)
                    .map(|_| {
                        [
                            gumbel_from_uniform(gumbel.gen::<f64>()),
                            gumbel_from_uniform(gumbel.gen::<f64>()),
                        ]
                    })
                    .collect();
                let gating = method
                    .gated()
                    .then_some((GateMode::StraightThrough, noise.as_slice(), self.cfg.tau));
                let mut tape = Tape::new();
                let jl = joint_loss(
                    &mut tape,
                    &self.model,
                    &features,
                    &targets,
                    &adapter,
                    gating,
                    priors,
                    &weights,
                )?;
                let loss = tape.value(jl.total).item();
                if !loss.is_finite() {
                    return Err(Error::numeric(format!(
                        "loss became {loss} on skill {index} after {} steps",
                        adam.steps_taken()
                    )));
                }
                nll.push(tape.value(jl.nll).item());
                total.push(loss);
                let grads = tape.backward(jl.total)?;
                let ids: Vec<NodeId> = jl.a.iter().chain(&jl.b).chain(&jl.logits).copied().collect();
                let zero_like = |id: NodeId| {
                    let (r, c) = tape.value(id).shape();
                    Mat::zeros(r, c)
                };
                let grad_mats: Vec<Mat> = ids
                    .iter()
                    .map(|&id| grads.get(id).cloned().unwrap_or_else(|| zero_like(id)))
                    .collect();
                let grad_refs: Vec<&Mat> = grad_mats.iter().collect();
                let SkillAdapter {
                    pairs, gate_logits, ..
                } = &mut adapter;
                let mut params: Vec<&mut Mat> = Vec::with_capacity(ids.len());
                let (a_refs, b_refs): (Vec<_>, Vec<_>) = pairs.iter_mut().map(|p| (&mut p.a, &mut p.b)).unzip();
                params.extend(a_refs);
                params.extend(b_refs);
                if method.gated() {
                    params.extend(gate_logits.iter_mut());
                }
                adam.step(&mut params, &grad_refs)?;
            }
        }
        if method.gated() {
            adapter.freeze_gates();
        } else {
            adapter.force_gates_on();
        }
        Ok(SkillTraining {
            adapter,
            nll,
            total,
            steps_per_epoch,
        })
    }

    /// Plain per-skill adapters: every skill starts from the same
    /// initialisation and trains with all gates on, no inheritance and no
    /// orthogonality term. Reference adapters for the observation study.
    pub fn train_independent(&self) -> Result<KnowledgeBase> {
        let mut plain = self.clone();
        plain.cfg.method = Method::NoGgm;
        plain.cfg.lambda = 0.0;
        let mut kb = KnowledgeBase::new(
            self.cfg.fingerprint(),
            self.cfg.embedding.clone(),
            self.embedder().digest(),
            "independent",
        );
        for t in 0..self.stream.config.n_train_skills {
            let spec = &self.stream.skills[t];
            let corpus = self.corpus(spec)?;
            let mut rng = self.rng(RNG_INIT, 0);
            let mut init = init_first_skill(spec.skill_id, &self.cfg.model.layer_shapes(), self.cfg.rank, &mut rng)?;
            init.force_gates_on();
            let training = plain.train_skill(t, init, &[])?;
            kb.push(SkillRecord {
                skill_id: spec.skill_id,
                name: spec.name.clone(),
                instruction_digest: self.corpus_digest(spec)?,
                adapter: training.adapter,
                subspace: build_subspace(spec.skill_id, &corpus, self.cfg.subspace_rank)?,
                sr_gt: None,
            })?;
        }
        Ok(kb)
    }

    /// Learns every training skill in order, evaluating all learned skills
    /// after each stage.
    pub fn train_stream(&self) -> Result<RunOutput> {
        self.train_stream_with(|_, _| Ok(()))
    }

    /// [`Engine::train_stream`] calling `on_stage(t, kb)` once skill `t` is
    /// stored and evaluated.
    pub fn train_stream_with(&self, mut on_stage: impl FnMut(usize, &KnowledgeBase) -> Result<()>) -> Result<RunOutput> {
        let started = std::time::Instant::now();
        let method = self.cfg.method;
        let mode = method.inference_mode();
        let mut kb = KnowledgeBase::new(
            self.cfg.fingerprint(),
            self.cfg.embedding.clone(),
            self.embedder().digest(),
            method.name(),
        );
        let n = self.stream.config.n_train_skills;
        let mut trajectory: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut trainings = Vec::with_capacity(n);
        let mut stage_secs = Vec::with_capacity(n);
        for t in 0..n {
            let stage_start = std::time::Instant::now();
            let spec = &self.stream.skills[t];
            let corpus = self.corpus(spec)?;
            let subspace = build_subspace(spec.skill_id, &corpus, self.cfg.subspace_rank)?;
            let init = self.initial_adapter(&kb, t, &corpus)?;
            let priors: Vec<Vec<Mat>> = if method.orthogonal() {
                kb.records
                    .iter()
                    .map(|r| r.adapter.pairs.iter().map(|p| p.b.clone()).collect())
                    .collect()
            } else {
                Vec::new()
            };
            let training = self.train_skill(t, init, &priors)?;
            kb.push(SkillRecord {
                skill_id: spec.skill_id,
                name: spec.name.clone(),
                instruction_digest: self.corpus_digest(spec)?,
                adapter: training.adapter.clone(),
                subspace,
                sr_gt: None,
            })?;
            let row = (0..=t)
                .map(|i| self.evaluate_skill(&kb, i, mode).map(|e| e.asr))
                .collect::<Result<Vec<_>>>()?;
            kb.records[t].sr_gt = Some(row[t]);
            trajectory.push(row);
            trainings.push(training);
            stage_secs.push(stage_start.elapsed().as_secs_f64());
            on_stage(t, &kb)?;
        }
        let report = self.build_report(&kb, mode, &trajectory, &trainings)?;
        Ok(RunOutput {
            kb,
            report,
            timing: super::Timing {
                total_secs: started.elapsed().as_secs_f64(),
                stage_secs,
            },
        })
    }
}
