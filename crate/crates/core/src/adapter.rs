//! Low-rank adapter lifecycle.
//!
//! Each skill owns one `(B, A)` pair per hidden layer plus a pair of gate
//! logits per layer (`[skip, inject]`). `A` carries knowledge shared between
//! skills and is inherited as a similarity-weighted mixture of earlier `A`s;
//! `B` is skill specific and is pushed away from earlier `B`s by the
//! normalised trace regulariser.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::{self, matmul, Mat};
use crate::subspace::AggregationWeights;
use crate::tape::{NodeId, Op, Tape};

/// Shape of the frozen weight an adapter attaches to: `out × in`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub out_dim: usize,
    pub in_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterPair {
    pub layer: usize,
    /// `r × in`
    pub a: Mat,
    /// `out × r`
    pub b: Mat,
}

impl AdapterPair {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn shape(&self) -> LayerShape {
        LayerShape {
            out_dim: self.b.rows(),
            in_dim: self.a.cols(),
        }
    }

    /// `ΔW = B A`, `out × in`.
    pub fn delta(&self) -> Mat {
        matmul(&self.b, &self.a).expect("adapter factors are conformable")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkillAdapter {
    pub skill_id: u32,
    pub pairs: Vec<AdapterPair>,
    /// One `1 × 2` row of `[skip, inject]` logits per layer.
    pub gate_logits: Vec<Mat>,
    /// Frozen per-layer inject decisions.
    pub gate_decisions: Vec<bool>,
}

/// Inject iff the inject logit strictly beats the skip logit.
pub fn gate_decision(logits: &Mat) -> bool {
    logits[(0, 1)] > logits[(0, 0)]
}

impl SkillAdapter {
    fn with_a(skill_id: u32, a_factors: Vec<Mat>, shapes: &[LayerShape]) -> SkillAdapter {
        let pairs = a_factors
            .into_iter()
            .zip(shapes)
            .enumerate()
            .map(|(layer, (a, s))| AdapterPair {
                layer,
                b: Mat::zeros(s.out_dim, a.rows()),
                a,
            })
            .collect::<Vec<_>>();
        let n = pairs.len();
        SkillAdapter {
            skill_id,
            pairs,
            gate_logits: vec![Mat::zeros(1, 2); n],
            gate_decisions: vec![false; n],
        }
    }

    pub fn layers(&self) -> usize {
        self.pairs.len()
    }

    pub fn rank(&self) -> usize {
        self.pairs.first().map_or(0, AdapterPair::rank)
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        self.pairs.iter().map(AdapterPair::shape).collect()
    }

    /// Recomputes `gate_decisions` from the logits without noise.
    pub fn freeze_gates(&mut self) {
        self.gate_decisions = self.gate_logits.iter().map(gate_decision).collect();
    }

    /// Pins every gate to "inject" (used when gating is disabled).
    pub fn force_gates_on(&mut self) {
        for l in &mut self.gate_logits {
            *l = Mat::row_vector(&[0.0, 1.0]).expect("static shape");
        }
        self.freeze_gates();
    }

    pub fn check_invariants(&self) -> Result<()> {
        let n = self.pairs.len();
        if self.gate_logits.len() != n || self.gate_decisions.len() != n {
            return Err(Error::shape(format!(
                "skill {}: {n} pairs, {} gate logits, {} decisions",
                self.skill_id,
                self.gate_logits.len(),
                self.gate_decisions.len()
            )));
        }
        for (l, p) in self.pairs.iter().enumerate() {
            if p.layer != l || p.b.cols() != p.a.rows() {
                return Err(Error::shape(format!("skill {}: malformed pair {l}", self.skill_id)));
            }
            if self.gate_logits[l].shape() != (1, 2) {
                return Err(Error::shape(format!("skill {}: gate logits {l} not 1x2", self.skill_id)));
            }
        }
        Ok(())
    }

    pub fn deltas(&self) -> Vec<Mat> {
        self.pairs.iter().map(AdapterPair::delta).collect()
    }
}

/// Kaiming-uniform `A` (bound `√(6 / in)`), zero `B`, zero gate logits.
pub fn init_first_skill<R: Rng>(skill_id: u32, shapes: &[LayerShape], rank: usize, rng: &mut R) -> Result<SkillAdapter> {
    if rank == 0 {
        return Err(Error::usage("adapter rank must be positive"));
    }
    let a = shapes
        .iter()
        .map(|s| {
            let bound = (6.0 / s.in_dim as f64).sqrt();
            let data = (0..rank * s.in_dim)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect();
            Mat::new(rank, s.in_dim, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SkillAdapter::with_a(skill_id, a, shapes))
}

/// Weighted mixture of earlier `A` factors: `A_l = Σ_g ω_g A_l^g`, `B = 0`.
pub fn inherit_shared(skill_id: u32, priors: &[&SkillAdapter], omega: &AggregationWeights) -> Result<SkillAdapter> {
    let Some(first) = priors.first() else {
        return Err(Error::usage(
            "cannot inherit from an empty knowledge base; initialise the first skill instead",
        ));
    };
    if omega.len() != priors.len() {
        return Err(Error::shape(format!(
            "{} weights for {} prior adapters",
            omega.len(),
            priors.len()
        )));
    }
    let shapes = first.shapes();
    check_compatible(priors, &shapes, first.rank())?;
    let mut a: Vec<Mat> = first
        .pairs
        .iter()
        .map(|p| Mat::zeros(p.a.rows(), p.a.cols()))
        .collect();
    for (adapter, &w) in priors.iter().zip(&omega.weights) {
        for (acc, pair) in a.iter_mut().zip(&adapter.pairs) {
            acc.axpy(w, &pair.a)?;
        }
    }
    Ok(SkillAdapter::with_a(skill_id, a, &shapes))
}

fn check_compatible(adapters: &[&SkillAdapter], shapes: &[LayerShape], rank: usize) -> Result<()> {
    for ad in adapters {
        ad.check_invariants()?;
        if ad.shapes() != shapes || ad.rank() != rank {
            return Err(Error::shape(format!(
                "adapter for skill {} does not match layer shapes/rank of the others",
                ad.skill_id
            )));
        }
    }
    Ok(())
}

/// `B / (‖B‖_F + ε)`
pub fn normalize_b(b: &Mat, eps: f64) -> Mat {
    b.scale(1.0 / (mat::frobenius_norm(b) + eps))
}

/// Differentiable `R = Σ_i Σ_l tr(B̃_iᵀ B̃_l)` against constant prior `B`s.
///
/// `prior_bs[i][l]` is layer `l` of earlier skill `i`.
pub fn orthogonality_regularizer(
    tape: &mut Tape,
    current_b: &[NodeId],
    prior_bs: &[Vec<Mat>],
    eps: f64,
) -> Result<NodeId> {
    if prior_bs.is_empty() {
        return Ok(tape.constant(Mat::scalar(0.0)));
    }
    // Σ_i B̃_i per layer, so the tape holds one trace per layer.
    let mut summed: Vec<Mat> = current_b
        .iter()
        .map(|&id| {
            let (r, c) = tape.value(id).shape();
            Mat::zeros(r, c)
        })
        .collect();
    for prior in prior_bs {
        if prior.len() != current_b.len() {
            return Err(Error::shape(format!(
                "prior skill has {} layers, current has {}",
                prior.len(),
                current_b.len()
            )));
        }
        for (acc, b) in summed.iter_mut().zip(prior) {
            acc.axpy(1.0, &normalize_b(b, eps))?;
        }
    }
    let mut terms = Vec::with_capacity(current_b.len());
    for (&cur, prior_sum) in current_b.iter().zip(summed) {
        let normed = tape.record(Op::FrobeniusNormalize { eps }, &[cur])?;
        let prior = tape.constant(prior_sum);
        terms.push(tape.record(Op::TraceProduct, &[prior, normed])?);
    }
    tape.add_all(&terms)
}

/// Plain evaluation of the regulariser.
pub fn orthogonality_value(current_b: &[Mat], prior_bs: &[Vec<Mat>], eps: f64) -> Result<f64> {
    let mut total = 0.0;
    for prior in prior_bs {
        if prior.len() != current_b.len() {
            return Err(Error::shape("layer count mismatch"));
        }
        for (cur, b) in current_b.iter().zip(prior) {
            total += mat::trace_product(&normalize_b(b, eps), &normalize_b(cur, eps))?;
        }
    }
    Ok(total)
}

/// `g · (B A)`
pub fn gated_delta(pair: &AdapterPair, gate: f64) -> Mat {
    pair.delta().scale(gate)
}

/// `L_s = Σ_l g_l` over 1x1 gate nodes.
pub fn sparsity_penalty(tape: &mut Tape, gates: &[NodeId]) -> Result<NodeId> {
    tape.add_all(gates)
}

/// Adapters folded into one dense delta per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergedAdapter {
    /// `Σ_t ω_t g_t^l B_t^l A_t^l`
    pub deltas: Vec<Mat>,
    /// Layer `l` is set when any contributor with `ω_t > 1e-6` injects there.
    pub merged_gates: Vec<bool>,
    /// Gate decisions of the highest-weight contributor.
    pub top1_gates: Vec<bool>,
    /// Index (into the input list) of the highest-weight contributor.
    pub top1: usize,
}

/// Contributors with weight at or below this do not count towards `merged_gates`.
pub const GATE_WEIGHT_FLOOR: f64 = 1e-6;

pub fn aggregate_adapters(adapters: &[&SkillAdapter], omega: &AggregationWeights) -> Result<MergedAdapter> {
    let Some(first) = adapters.first() else {
        return Err(Error::shape("no adapters to aggregate"));
    };
    if omega.len() != adapters.len() {
        return Err(Error::shape(format!(
            "{} weights for {} adapters",
            omega.len(),
            adapters.len()
        )));
    }
    let shapes = first.shapes();
    check_compatible(adapters, &shapes, first.rank())?;
    let layers = shapes.len();
    let mut deltas: Vec<Mat> = shapes.iter().map(|s| Mat::zeros(s.out_dim, s.in_dim)).collect();
    let mut merged_gates = vec![false; layers];
    for (adapter, &w) in adapters.iter().zip(&omega.weights) {
        for l in 0..layers {
            if !adapter.gate_decisions[l] {
                continue;
            }
            deltas[l].axpy(w, &adapter.pairs[l].delta())?;
            if w > GATE_WEIGHT_FLOOR {
                merged_gates[l] = true;
            }
        }
    }
    let top1 = omega.argmax();
    Ok(MergedAdapter {
        deltas,
        merged_gates,
        top1_gates: adapters[top1].gate_decisions.clone(),
        top1,
    })
}
