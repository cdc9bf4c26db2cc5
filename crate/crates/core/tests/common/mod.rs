//! Test oracles shared by the integration targets.
#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use skillbase::adapter::{init_first_skill, SkillAdapter};
use skillbase::embed::EmbeddingConfig;
use skillbase::engine::{joint_loss, GateMode, LossWeights};
use skillbase::kb::{Fingerprint, KnowledgeBase, SkillRecord};
use skillbase::subspace::build_subspace;
use skillbase::model::{BaseModel, Episode, ModelShape, GO, SEP};
use skillbase::tape::Tape;
use skillbase::Mat;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Mat::new(rows, cols, data).unwrap()
}

/// Eigenvalues of a symmetric matrix by cyclic two-sided Jacobi rotations,
/// sorted descending. Deliberately independent of the library's SVD.
pub fn symmetric_eigenvalues(m: &[Vec<f64>]) -> Vec<f64> {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    for _sweep in 0..200 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// Singular values as square roots of the eigenvalues of the smaller Gram
/// matrix.
pub fn oracle_singular_values(x: &Mat) -> Vec<f64> {
    let (m, n) = x.shape();
    let k = m.min(n);
    let gram: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| {
                    if m >= n {
                        (0..m).map(|r| x[(r, i)] * x[(r, j)]).sum()
                    } else {
                        (0..n).map(|c| x[(i, c)] * x[(j, c)]).sum()
                    }
                })
                .collect()
        })
        .collect();
    symmetric_eigenvalues(&gram).into_iter().map(|v| v.max(0.0).sqrt()).collect()
}

/// A small differentiable problem: model, one batch, random adapter with
/// non-zero `B`, random prior `B`s and Gumbel noise.
pub struct GradProblem {
    pub model: BaseModel,
    pub features: Mat,
    pub targets: Vec<usize>,
    pub adapter: SkillAdapter,
    pub priors: Vec<Vec<Mat>>,
    pub noise: Vec<[f64; 2]>,
    pub weights: LossWeights,
    pub tau: f64,
}

impl GradProblem {
    pub fn new(seed: u64, hidden: usize, layers: usize, rank: usize) -> Self {
        let shape = ModelShape { vocab: 32, hidden, layers };
        let model = BaseModel::new(shape, seed ^ 0xabc).unwrap();
        let mut r = rng(seed);
        let layout = model.layout();
        let mut prompt: Vec<usize> = vec![layout.word_token("move"), layout.word_token("left"), SEP];
        let len = r.gen_range(2..5);
        let input: Vec<usize> = (0..len).map(|_| layout.data_token(r.gen_range(0..16))).collect();
        prompt.extend(&input);
        prompt.push(GO);
        let target: Vec<usize> = input.iter().rev().copied().collect();
        let episode = Episode {
            instruction: "move left".into(),
            prompt,
            target,
        };
        let (features, targets) = model.supervised_rows(&episode).unwrap();
        let mut adapter = init_first_skill(0, &shape.layer_shapes(), rank, &mut r).unwrap();
        for p in &mut adapter.pairs {
            p.b = random_mat(&mut r, p.b.rows(), p.b.cols()).scale(0.5);
        }
        for g in &mut adapter.gate_logits {
            *g = random_mat(&mut r, 1, 2);
        }
        let priors = (0..2)
            .map(|_| adapter.pairs.iter().map(|p| random_mat(&mut r, p.b.rows(), p.b.cols())).collect())
            .collect();
        let noise = (0..layers)
            .map(|_| [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)])
            .collect();
        GradProblem {
            model,
            features,
            targets,
            adapter,
            priors,
            noise,
            weights: LossWeights {
                lambda: 0.1,
                lambda_s: 0.01,
                eps: 0.01,
            },
            tau: 1.0,
        }
    }

    pub fn loss(&self, adapter: &SkillAdapter) -> f64 {
        let mut tape = Tape::new();
        let jl = joint_loss(
            &mut tape,
            &self.model,
            &self.features,
            &self.targets,
            adapter,
            Some((GateMode::Soft, &self.noise, self.tau)),
            &self.priors,
            &self.weights,
        )
        .unwrap();
        tape.value(jl.total).item()
    }

    /// Worst relative error between tape gradients and central differences
    /// over every entry of `A`, `B` and the gate logits.
    pub fn max_relative_error(&self, step: f64) -> f64 {
        let mut tape = Tape::new();
        let jl = joint_loss(
            &mut tape,
            &self.model,
            &self.features,
            &self.targets,
            &self.adapter,
            Some((GateMode::Soft, &self.noise, self.tau)),
            &self.priors,
            &self.weights,
        )
        .unwrap();
        let grads = tape.backward(jl.total).unwrap();
        let mut worst: f64 = 0.0;
        let layers = self.adapter.layers();
        for l in 0..layers {
            for which in 0..3 {
                let id = [jl.a[l], jl.b[l], jl.logits[l]][which];
                let analytic = grads.get(id).cloned().unwrap();
                for k in 0..analytic.len() {
                    let bump = |delta: f64| {
                        let mut ad = self.adapter.clone();
                        let m = match which {
                            0 => &mut ad.pairs[l].a,
                            1 => &mut ad.pairs[l].b,
                            _ => &mut ad.gate_logits[l],
                        };
                        m.data_mut()[k] += delta;
                        self.loss(&ad)
                    };
                    let fd = (bump(step) - bump(-step)) / (2.0 * step);
                    let g = analytic.data()[k];
                    let denom = g.abs().max(fd.abs()).max(1e-6);
                    worst = worst.max((g - fd).abs() / denom);
                }
            }
        }
        worst
    }
}

pub fn small_fingerprint() -> Fingerprint {
    Fingerprint {
        vocab: 32,
        hidden: 10,
        layers: 3,
        rank: 2,
        embed_dim: 24,
        base_seed: 9,
    }
}

/// `n` records with random factors, gates and subspaces.
pub fn synthetic_kb(n: usize, seed: u64) -> KnowledgeBase {
    let fp = small_fingerprint();
    let embedding = EmbeddingConfig {
        dim: fp.embed_dim,
        ..EmbeddingConfig::default()
    };
    let mut kb = KnowledgeBase::new(fp, embedding, "digest", "full");
    let mut r = rng(seed);
    let shapes = ModelShape {
        vocab: fp.vocab,
        hidden: fp.hidden,
        layers: fp.layers,
    }
    .layer_shapes();
    for i in 0..n {
        let id = 10 + i as u32;
        let mut adapter = init_first_skill(id, &shapes, fp.rank, &mut r).unwrap();
        for p in &mut adapter.pairs {
            p.b = random_mat(&mut r, p.b.rows(), p.b.cols());
        }
        for g in &mut adapter.gate_logits {
            *g = random_mat(&mut r, 1, 2);
        }
        adapter.freeze_gates();
        let corpus = random_mat(&mut r, 6, fp.embed_dim);
        kb.push(SkillRecord {
            skill_id: id,
            name: format!("skill-{i}"),
            instruction_digest: format!("{i:064x}"),
            adapter,
            subspace: build_subspace(id, &corpus, 3).unwrap(),
            sr_gt: (i % 2 == 0).then_some(0.25 * i as f64),
        })
        .unwrap();
    }
    kb
}
