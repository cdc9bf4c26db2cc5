use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Engine, Mode};
use crate::adapter::{aggregate_adapters, SkillAdapter};
use crate::error::{Error, Result};
use crate::kb::KnowledgeBase;
use crate::model::{Injection, GO, SEP};
use crate::skillgen::{episode_input, Split};
use crate::subspace::{aggregation_weights, argmax, AggregationWeights};

/// Result of one open-set query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    pub tokens: Vec<usize>,
    pub values: Vec<Option<u32>>,
    pub similarities: Vec<f64>,
    pub omega: Vec<f64>,
    /// Skill id of the most similar stored skill.
    pub top1: u32,
    pub gates: Vec<bool>,
}

/// Routing decision for an instruction, independent of the input tokens.
#[derive(Clone, Debug)]
pub struct Route {
    pub injection: Injection,
    pub similarities: Vec<f64>,
    pub omega: Vec<f64>,
    pub top1: usize,
    pub gates: Vec<bool>,
}

/// Per-skill evaluation outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct SkillEval {
    pub asr: f64,
    /// Ω averaged over the evaluation episodes.
    pub omega: Vec<f64>,
}

impl Engine {
    /// Rejects knowledge bases built for another model or embedding.
    pub fn check_kb(&self, kb: &KnowledgeBase) -> Result<()> {
        kb.check_fingerprint(&self.cfg.fingerprint())?;
        let digest = self.embedder().digest();
        if kb.embedding_digest != digest {
            return Err(Error::Compatibility(format!(
                "knowledge base embedding digest {} does not match provider {}",
                kb.embedding_digest, digest
            )));
        }
        Ok(())
    }

    /// Similarities, Ω and the injected update for `instruction`.
    pub fn route(&self, kb: &KnowledgeBase, instruction: &str, mode: Mode) -> Result<Route> {
        if kb.is_empty() {
            return Err(Error::usage("knowledge base is empty"));
        }
        let e = self.embed(instruction)?;
        let sims = kb
            .records
            .iter()
            .map(|r| r.subspace.similarity(&e))
            .collect::<Result<Vec<_>>>()?;
        let weighted = aggregation_weights(&sims, self.cfg.gamma)?;
        let top1 = argmax(&weighted.weights);
        let adapters: Vec<&SkillAdapter> = kb.records.iter().map(|r| &r.adapter).collect();
        let (injection, omega, gates, top1) = match mode {
            Mode::Aggregate => {
                let merged = aggregate_adapters(&adapters, &weighted)?;
                (Injection::from_merged(&merged), weighted.weights, merged.top1_gates, top1)
            }
            Mode::Avg => {
                let uniform = AggregationWeights::uniform(adapters.len(), self.cfg.gamma);
                let mut merged = aggregate_adapters(&adapters, &uniform)?;
                merged.top1 = top1;
                merged.top1_gates = adapters[top1].gate_decisions.clone();
                (Injection::from_merged(&merged), uniform.weights, merged.top1_gates, top1)
            }
            Mode::Top1 => {
                let mut omega = vec![0.0; adapters.len()];
                omega[top1] = 1.0;
                let ad = adapters[top1];
                (Injection::from_adapter(ad), omega, ad.gate_decisions.clone(), top1)
            }
            Mode::Latest => {
                let last = adapters.len() - 1;
                let mut omega = vec![0.0; adapters.len()];
                omega[last] = 1.0;
                let ad = adapters[last];
                (Injection::from_adapter(ad), omega, ad.gate_decisions.clone(), last)
            }
        };
        Ok(Route {
            injection,
            similarities: sims,
            omega,
            top1,
            gates,
        })
    }

    /// Builds the prompt for `instruction` and `input` values.
    pub fn prompt(&self, instruction: &str, input: &[u32]) -> Result<Vec<usize>> {
        let layout = self.model.layout();
        if let Some(v) = input.iter().find(|&&v| v as usize >= layout.data_alphabet()) {
            return Err(Error::usage(format!(
                "input value {v} outside 0..{}",
                layout.data_alphabet()
            )));
        }
        let mut prompt = layout.instruction_tokens_for(instruction);
        prompt.push(SEP);
        prompt.extend(input.iter().map(|&v| layout.data_token(v)));
        prompt.push(GO);
        Ok(prompt)
    }

    /// Open-set inference: no skill id is involved.
    pub fn infer(&self, kb: &KnowledgeBase, instruction: &str, input: &[u32], mode: Mode) -> Result<Inference> {
        self.check_kb(kb)?;
        let route = self.route(kb, instruction, mode)?;
        let prompt = self.prompt(instruction, input)?;
        let tokens = self.model.generate(&prompt, &route.injection, self.cfg.max_steps)?;
        let layout = self.model.layout();
        Ok(Inference {
            values: tokens.iter().map(|&t| layout.data_value(t)).collect(),
            tokens,
            similarities: route.similarities,
            omega: route.omega,
            top1: kb.records[route.top1].skill_id,
            gates: route.gates,
        })
    }

    /// Exact-match success rate of stream skill `index` over its evaluation
    /// episodes. The skill index is used only to fetch episodes and score.
    pub fn evaluate_skill(&self, kb: &KnowledgeBase, index: usize, mode: Mode) -> Result<SkillEval> {
        let episodes = self.stream.episodes(index, Split::Eval);
        let layout = self.model.layout();
        let mut routes: HashMap<&str, Route> = HashMap::new();
        let mut successes = 0usize;
        let mut omega = vec![0.0; kb.len()];
        for ep in &episodes {
            if !routes.contains_key(ep.instruction.as_str()) {
                routes.insert(&ep.instruction, self.route(kb, &ep.instruction, mode)?);
            }
            let route = &routes[ep.instruction.as_str()];
            for (acc, w) in omega.iter_mut().zip(&route.omega) {
                *acc += w / episodes.len() as f64;
            }
            let prompt = self.prompt(&ep.instruction, &episode_input(ep, &layout))?;
            let out = self.model.generate(&prompt, &route.injection, self.cfg.max_steps)?;
            if out == ep.target {
                successes += 1;
            }
        }
        Ok(SkillEval {
            asr: successes as f64 / episodes.len() as f64,
            omega,
        })
    }

    /// Evaluation of every skill in the stream, holdouts included.
    pub fn evaluate(&self, kb: &KnowledgeBase, mode: Mode) -> Result<Vec<SkillEval>> {
        self.check_kb(kb)?;
        (0..self.stream.skills.len())
            .map(|i| self.evaluate_skill(kb, i, mode))
            .collect()
    }

    /// Fraction of training-skill instructions whose Top-1 route is the
    /// skill that owns them.
    pub fn routing_accuracy(&self, kb: &KnowledgeBase) -> Result<f64> {
        let mut hits = 0usize;
        let mut total = 0usize;
        for spec in self.stream.training_skills() {
            if kb.record(spec.skill_id).is_none() {
                continue;
            }
            for text in &spec.instructions {
                let route = self.route(kb, text, Mode::Aggregate)?;
                total += 1;
                if kb.records[route.top1].skill_id == spec.skill_id {
                    hits += 1;
                }
            }
        }
        if total == 0 {
            return Err(Error::usage("no stored training skill to route to"));
        }
        Ok(hits as f64 / total as f64)
    }
}
