use serde::{Deserialize, Serialize};

use super::Engine;
use crate::error::{Error, Result};
use crate::kb::KnowledgeBase;
use crate::mat::cosine;

/// Parameter-side versus semantic-side similarity of stored skills.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub skill_ids: Vec<u32>,
    /// Cosine of flattened `ΔW` (all layers).
    pub parameter_similarity: Vec<Vec<f64>>,
    /// Cosine of mean instruction embeddings.
    pub semantic_similarity: Vec<Vec<f64>>,
    /// Spearman ρ between the two matrices' off-diagonal entries.
    pub spearman: f64,
    /// Spearman ρ between semantic similarity and primitive overlap.
    pub semantic_vs_relatedness: f64,
    pub mean_a_similarity: f64,
    pub mean_b_similarity: f64,
    /// Mean `|ΔW|` entry per layer, averaged over skills.
    pub layer_profile: Vec<f64>,
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with averaged ties; 0 when either side is
/// constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(format!("{} vs {} samples", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Ok(0.0);
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

fn similarity_matrix(vectors: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = vectors.len();
    let mut m = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let c = cosine(&vectors[i], &vectors[j])?;
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    Ok(m)
}

fn upper(m: &[Vec<f64>]) -> Vec<f64> {
    let n = m.len();
    (0..n).flat_map(|i| (i + 1..n).map(move |j| m[i][j])).collect()
}

fn mean_off_diagonal(m: &[Vec<f64>]) -> f64 {
    let u = upper(m);
    u.iter().sum::<f64>() / u.len().max(1) as f64
}

/// Similarity structure of a trained knowledge base.
pub fn observation_study(engine: &Engine, kb: &KnowledgeBase) -> Result<StudyReport> {
    if kb.len() < 4 {
        return Err(Error::usage(format!(
            "observation study needs at least 4 skills, knowledge base has {}",
            kb.len()
        )));
    }
    let mut deltas = Vec::with_capacity(kb.len());
    let mut a_flat = Vec::with_capacity(kb.len());
    let mut b_flat = Vec::with_capacity(kb.len());
    let mut semantic = Vec::with_capacity(kb.len());
    let mut stream_index = Vec::with_capacity(kb.len());
    let layers = kb.fingerprint.layers;
    let mut layer_profile = vec![0.0; layers];
    for r in &kb.records {
        let idx = engine
            .stream
            .skills
            .iter()
            .position(|s| s.skill_id == r.skill_id)
            .ok_or_else(|| Error::usage(format!("skill {} is not part of the stream", r.skill_id)))?;
        stream_index.push(idx);
        let ds = r.adapter.deltas();
        for (l, d) in ds.iter().enumerate() {
            layer_profile[l] += d.data().iter().map(|v| v.abs()).sum::<f64>() / d.data().len() as f64 / kb.len() as f64;
        }
        deltas.push(ds.iter().flat_map(|d| d.data().to_vec()).collect::<Vec<_>>());
        a_flat.push(r.adapter.pairs.iter().flat_map(|p| p.a.data().to_vec()).collect::<Vec<_>>());
        b_flat.push(r.adapter.pairs.iter().flat_map(|p| p.b.data().to_vec()).collect::<Vec<_>>());
        let corpus = engine.corpus(&engine.stream.skills[idx])?;
        let mut mean = vec![0.0; corpus.cols()];
        for i in 0..corpus.rows() {
            for (m, v) in mean.iter_mut().zip(corpus.row(i)) {
                *m += v / corpus.rows() as f64;
            }
        }
        semantic.push(mean);
    }
    let parameter_similarity = similarity_matrix(&deltas)?;
    let semantic_similarity = similarity_matrix(&semantic)?;
    let related = engine.stream.relatedness();
    let related_sub: Vec<Vec<f64>> = stream_index
        .iter()
        .map(|&i| stream_index.iter().map(|&j| related[i][j]).collect())
        .collect();
    Ok(StudyReport {
        skill_ids: kb.records.iter().map(|r| r.skill_id).collect(),
        spearman: spearman(&upper(&parameter_similarity), &upper(&semantic_similarity))?,
        semantic_vs_relatedness: spearman(&upper(&semantic_similarity), &upper(&related_sub))?,
        mean_a_similarity: mean_off_diagonal(&similarity_matrix(&a_flat)?),
        mean_b_similarity: mean_off_diagonal(&similarity_matrix(&b_flat)?),
        parameter_similarity,
        semantic_similarity,
        layer_profile,
    })
}
