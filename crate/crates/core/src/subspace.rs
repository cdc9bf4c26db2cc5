//! Skill semantic subspaces and similarity-weighted aggregation.
//!
//! A skill's subspace is spanned by the leading right singular vectors of its
//! instruction-embedding matrix. Only the `d × r_s` basis is kept; the
//! projector `ψ = V Vᵀ` is applied in factored form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::{cosine, matmul_nt, svd, Mat};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubspaceProjection {
    pub skill_id: u32,
    /// `d × r_s`, orthonormal columns.
    pub basis: Mat,
}

impl SubspaceProjection {
    pub fn dim(&self) -> usize {
        self.basis.rows()
    }

    pub fn rank(&self) -> usize {
        self.basis.cols()
    }

    /// The dense `d × d` projector. Only needed for checks.
    pub fn materialize(&self) -> Mat {
        matmul_nt(&self.basis, &self.basis).expect("basis is conformable with itself")
    }

    /// `ψ e = V (Vᵀ e)`.
    pub fn project(&self, e: &[f64]) -> Result<Vec<f64>> {
        if e.len() != self.dim() {
            return Err(Error::shape(format!(
                "query of dimension {} against subspace of dimension {}",
                e.len(),
                self.dim()
            )));
        }
        let coeffs = self.basis.tmul_vec(e)?;
        self.basis.mul_vec(&coeffs)
    }

    /// Cosine between `e` and its projection; 0 when the projection vanishes.
    pub fn similarity(&self, e: &[f64]) -> Result<f64> {
        let p = self.project(e)?;
        cosine(e, &p)
    }
}

/// Builds the rank-`r_s` subspace of the rows of `x` (`M × d`).
pub fn build_subspace(skill_id: u32, x: &Mat, r_s: usize) -> Result<SubspaceProjection> {
    let (m, d) = x.shape();
    if r_s == 0 || r_s > m.min(d) {
        return Err(Error::usage(format!(
            "subspace rank {r_s} outside 1..={} for a {m}x{d} corpus",
            m.min(d)
        )));
    }
    let dec = svd(x)?;
    let mut basis = Mat::zeros(d, r_s);
    for k in 0..r_s {
        for (i, &v) in dec.vt.row(k).iter().enumerate() {
            basis[(i, k)] = v;
        }
    }
    Ok(SubspaceProjection { skill_id, basis })
}

pub fn project_query(e: &[f64], psi: &SubspaceProjection) -> Result<Vec<f64>> {
    psi.project(e)
}

pub fn skill_similarity(e: &[f64], psi: &SubspaceProjection) -> Result<f64> {
    psi.similarity(e)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights {
    pub weights: Vec<f64>,
    pub gamma: f64,
}

impl AggregationWeights {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Index of the largest weight; the first one wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.weights)
    }

    pub fn uniform(n: usize, gamma: f64) -> Self {
        AggregationWeights {
            weights: vec![1.0 / n as f64; n],
            gamma,
        }
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Below this total mass the weights fall back to uniform.
pub const WEIGHT_MASS_FLOOR: f64 = 1e-12;

/// `w_i = s_i^γ / Σ_j s_j^γ` with similarities clipped to `[0, 1]`.
pub fn aggregation_weights(sims: &[f64], gamma: f64) -> Result<AggregationWeights> {
    if sims.is_empty() {
        return Err(Error::usage("aggregation needs at least one similarity"));
    }
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(Error::usage(format!("invalid aggregation exponent {gamma}")));
    }
    let powered: Vec<f64> = sims
        .iter()
        .map(|&s| {
            let s = if s.is_finite() { s.clamp(0.0, 1.0) } else { 0.0 };
            s.powf(gamma)
        })
        .collect();
    let total: f64 = powered.iter().sum();
    if total < WEIGHT_MASS_FLOOR {
        return Ok(AggregationWeights::uniform(sims.len(), gamma));
    }
    Ok(AggregationWeights {
        weights: powered.iter().map(|p| p / total).collect(),
        gamma,
    })
}

/// Similarity of one query embedding against every stored subspace.
pub fn similarities(e: &[f64], subspaces: &[&SubspaceProjection]) -> Result<Vec<f64>> {
    subspaces.iter().map(|s| s.similarity(e)).collect()
}
