//! Append-only reverse-mode autodiff tape over [`Mat`] values.
//!
//! The op set is closed: everything the toy model and the regularisers need
//! is composed from the variants of [`Op`]. Every node stores its forward
//! value; `backward` walks node ids in decreasing order exactly once.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::mat::{self, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Input or parameter; no parents.
    Leaf,
    MatMul,
    /// `a · bᵀ`
    MatMulNT,
    Transpose,
    Add,
    Sub,
    Hadamard,
    Scale(f64),
    /// `s · m` with `s` a 1x1 node.
    ScalarMul,
    /// Adds a 1xC row to every row of an RxC matrix.
    AddRowBias,
    Tanh,
    SoftmaxRows,
    /// One entry of the input as a 1x1 node.
    Select { row: usize, col: usize },
    /// `Σ_i -log softmax(row_i)[targets[i]]`, 1x1.
    SoftmaxCrossEntropy { targets: Vec<usize> },
    /// `tr(aᵀb)`, 1x1.
    TraceProduct,
    /// `m / (‖m‖_F + eps)`.
    FrobeniusNormalize { eps: f64 },
    Sum,
    /// Forward value is the stored hard value; the gradient flows to the
    /// parent unchanged.
    StraightThrough { forward: f64 },
}

impl Op {
    /// Parses a tag for the parameter-free ops.
    pub fn parse(tag: &str) -> Result<Op> {
        Ok(match tag {
            "leaf" => Op::Leaf,
            "matmul" => Op::MatMul,
            "matmul_nt" => Op::MatMulNT,
            "transpose" => Op::Transpose,
            "add" => Op::Add,
            "sub" => Op::Sub,
            "hadamard" => Op::Hadamard,
            "scalar_mul" => Op::ScalarMul,
            "add_row_bias" => Op::AddRowBias,
            "tanh" => Op::Tanh,
            "softmax_rows" => Op::SoftmaxRows,
            "trace_product" => Op::TraceProduct,
            "sum" => Op::Sum,
            other => return Err(Error::usage(format!("unknown op tag `{other}`"))),
        })
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::MatMulNT => "matmul_nt",
            Op::Transpose => "transpose",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Hadamard => "hadamard",
            Op::Scale(_) => "scale",
            Op::ScalarMul => "scalar_mul",
            Op::AddRowBias => "add_row_bias",
            Op::Tanh => "tanh",
            Op::SoftmaxRows => "softmax_rows",
            Op::Select { .. } => "select",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::TraceProduct => "trace_product",
            Op::FrobeniusNormalize { .. } => "frobenius_normalize",
            Op::Sum => "sum",
            Op::StraightThrough { .. } => "straight_through",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Leaf => 0,
            Op::MatMul
            | Op::MatMulNT
            | Op::Add
            | Op::Sub
            | Op::Hadamard
            | Op::ScalarMul
            | Op::AddRowBias
            | Op::TraceProduct => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub id: NodeId,
    pub value: Mat,
    pub op: Op,
    pub parents: Vec<NodeId>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeSet<NodeId>,
    backward_done: bool,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<(NodeId, Mat)>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.grads.iter().find(|(n, _)| *n == id).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Mat)> {
        self.grads.iter().map(|(n, g)| (*n, g))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Result of [`Tape::st_gumbel_gate`].
#[derive(Debug, Clone, Copy)]
pub struct GumbelGate {
    /// True when the injection option wins the noisy argmax.
    pub hard: bool,
    /// Soft probability of the injection option, 1x1.
    pub soft: NodeId,
    /// Straight-through node: forward value is `hard`, gradient goes to `soft`.
    pub gate: NodeId,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn param_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.params.iter().copied()
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, value: Mat) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            id,
            value,
            op,
            parents,
        });
        id
    }

    /// A constant input; never receives a gradient entry.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(Op::Leaf, Vec::new(), value)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Mat) -> NodeId {
        let id = self.push(Op::Leaf, Vec::new(), value);
        self.params.insert(id);
        id
    }

    /// Computes `op` over `inputs` and appends the result.
    pub fn record(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if op == Op::Leaf {
            return Err(Error::usage("leaves are created with `constant` or `param`"));
        }
        if inputs.len() != op.arity() {
            return Err(Error::usage(format!(
                "op `{}` takes {} inputs, got {}",
                op.tag(),
                op.arity(),
                inputs.len()
            )));
        }
        if let Some(bad) = inputs.iter().find(|i| i.0 >= self.nodes.len()) {
            return Err(Error::usage(format!("input node {} is not on the tape", bad.0)));
        }
        let value = self.forward(&op, inputs)?;
        if !value.is_finite() {
            return Err(Error::numeric(format!("op `{}` produced non-finite values", op.tag())));
        }
        Ok(self.push(op, inputs.to_vec(), value))
    }

    fn forward(&self, op: &Op, inputs: &[NodeId]) -> Result<Mat> {
        let v = |i: usize| &self.nodes[inputs[i].0].value;
        Ok(match op {
            Op::Leaf => unreachable!(),
            Op::MatMul => mat::matmul(v(0), v(1))?,
            Op::MatMulNT => mat::matmul_nt(v(0), v(1))?,
            Op::Transpose => v(0).transpose(),
            Op::Add => v(0).add(v(1))?,
            Op::Sub => v(0).sub(v(1))?,
            Op::Hadamard => v(0).hadamard(v(1))?,
            Op::Scale(c) => v(0).scale(*c),
            Op::ScalarMul => {
                let s = v(0);
                if s.shape() != (1, 1) {
                    return Err(Error::shape(format!("scalar_mul: scalar is {:?}", s.shape())));
                }
                v(1).scale(s.item())
            }
            Op::AddRowBias => {
                let (x, b) = (v(0), v(1));
                if b.rows() != 1 || b.cols() != x.cols() {
                    return Err(Error::shape(format!(
                        "add_row_bias: {:?} + {:?}",
                        x.shape(),
                        b.shape()
                    )));
                }
                let mut out = x.clone();
                for r in 0..out.rows() {
                    for (o, bb) in out.row_mut(r).iter_mut().zip(b.data()) {
                        *o += bb;
                    }
                }
                out
            }
            Op::Tanh => v(0).map(f64::tanh),
            Op::SoftmaxRows => softmax_rows(v(0)),
            Op::Select { row, col } => {
                let x = v(0);
                if *row >= x.rows() || *col >= x.cols() {
                    return Err(Error::shape(format!(
                        "select ({row},{col}) out of {:?}",
                        x.shape()
                    )));
                }
                Mat::scalar(x[(*row, *col)])
            }
            Op::SoftmaxCrossEntropy { targets } => {
                let x = v(0);
                if targets.len() != x.rows() {
                    return Err(Error::shape(format!(
                        "cross entropy: {} targets for {} rows",
                        targets.len(),
                        x.rows()
                    )));
                }
                if let Some(t) = targets.iter().find(|&&t| t >= x.cols()) {
                    return Err(Error::shape(format!("target {t} out of {} classes", x.cols())));
                }
                let mut loss = 0.0;
                for (r, &t) in targets.iter().enumerate() {
                    loss += log_sum_exp(x.row(r)) - x[(r, t)];
                }
                Mat::scalar(loss)
            }
            Op::TraceProduct => Mat::scalar(mat::trace_product(v(0), v(1))?),
            Op::FrobeniusNormalize { eps } => {
                let n = mat::frobenius_norm(v(0));
                v(0).scale(1.0 / (n + eps))
            }
            Op::Sum => Mat::scalar(v(0).sum()),
            Op::StraightThrough { forward } => {
                if v(0).shape() != (1, 1) {
                    return Err(Error::shape("straight_through expects a 1x1 input"));
                }
                Mat::scalar(*forward)
            }
        })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::MatMul, &[a, b])
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::MatMulNT, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.record(Op::Scale(c), &[a])
    }

    pub fn scalar_mul(&mut self, s: NodeId, m: NodeId) -> Result<NodeId> {
        self.record(Op::ScalarMul, &[s, m])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Sum, &[a])
    }

    /// Sums a list of 1x1 nodes; an empty list yields a constant zero.
    pub fn add_all(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let Some((&first, rest)) = terms.split_first() else {
            return Ok(self.constant(Mat::scalar(0.0)));
        };
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Straight-through Gumbel-softmax gate over 1x2 logits.
    ///
    /// Index 0 is "skip", index 1 is "inject". The soft value is
    /// `softmax((logits + noise) / tau)[1]`; the hard decision injects only
    /// when index 1 strictly wins, so ties resolve to skip.
    pub fn st_gumbel_gate(&mut self, logits: NodeId, noise: [f64; 2], tau: f64) -> Result<GumbelGate> {
        if !(tau > 0.0) {
            return Err(Error::usage(format!("gumbel temperature must be positive, got {tau}")));
        }
        if self.value(logits).shape() != (1, 2) {
            return Err(Error::shape(format!(
                "gate logits must be 1x2, got {:?}",
                self.value(logits).shape()
            )));
        }
        let noise = self.constant(Mat::row_vector(&noise)?);
        let perturbed = self.add(logits, noise)?;
        let scaled = self.scale(perturbed, 1.0 / tau)?;
        let probs = self.record(Op::SoftmaxRows, &[scaled])?;
        let soft = self.record(Op::Select { row: 0, col: 1 }, &[probs])?;
        let p = self.value(perturbed);
        let hard = p[(0, 1)] > p[(0, 0)];
        let gate = self.record(
            Op::StraightThrough {
                forward: if hard { 1.0 } else { 0.0 },
            },
            &[soft],
        )?;
        Ok(GumbelGate { hard, soft, gate })
    }

    /// Clears the backward marker so the tape can be differentiated again.
    pub fn reset(&mut self) {
        self.backward_done = false;
    }

    /// Reverse sweep from a 1x1 `loss` node.
    ///
    /// A second call without [`Tape::reset`] is a usage error.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::usage("backward already ran on this tape; call reset first"));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::usage(format!("loss node {} is not on the tape", loss.0)));
        }
        if self.nodes[loss.0].value.shape() != (1, 1) {
            return Err(Error::usage(format!(
                "loss must be scalar, got {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Mat>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Mat::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.op == Op::Leaf {
                grads[id] = Some(g);
                continue;
            }
            let contributions = self.local_grads(node, &g)?;
            for (parent, contrib) in node.parents.iter().zip(contributions) {
                match &mut grads[parent.0] {
                    Some(acc) => acc.axpy(1.0, &contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        let mut out = Vec::with_capacity(self.params.len());
        for &p in &self.params {
            let g = grads
                .get_mut(p.0)
                .and_then(Option::take)
                .unwrap_or_else(|| {
                    let (r, c) = self.nodes[p.0].value.shape();
                    Mat::zeros(r, c)
                });
            if !g.is_finite() {
                return Err(Error::numeric(format!("non-finite gradient for node {}", p.0)));
            }
            out.push((p, g));
        }
        Ok(Gradients { grads: out })
    }

    fn local_grads(&self, node: &Node, g: &Mat) -> Result<Vec<Mat>> {
        let pv = |i: usize| &self.nodes[node.parents[i].0].value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul => vec![mat::matmul_nt(g, pv(1))?, mat::matmul_tn(pv(0), g)?],
            Op::MatMulNT => vec![mat::matmul(g, pv(1))?, mat::matmul_tn(g, pv(0))?],
            Op::Transpose => vec![g.transpose()],
            Op::Add => vec![g.clone(), g.clone()],
            Op::Sub => vec![g.clone(), g.scale(-1.0)],
            Op::Hadamard => vec![g.hadamard(pv(1))?, g.hadamard(pv(0))?],
            Op::Scale(c) => vec![g.scale(*c)],
            Op::ScalarMul => {
                let ds = mat::trace_product(g, pv(1))?;
                vec![Mat::scalar(ds), g.scale(pv(0).item())]
            }
            Op::AddRowBias => {
                let mut db = Mat::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (d, x) in db.data_mut().iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                vec![g.clone(), db]
            }
            Op::Tanh => {
                let y = &node.value;
                let mut d = g.clone();
                for (di, yi) in d.data_mut().iter_mut().zip(y.data()) {
                    *di *= 1.0 - yi * yi;
                }
                vec![d]
            }
            Op::SoftmaxRows => {
                let y = &node.value;
                let mut d = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let inner = mat::dot(g.row(r), y.row(r));
                    for c in 0..y.cols() {
                        d[(r, c)] = y[(r, c)] * (g[(r, c)] - inner);
                    }
                }
                vec![d]
            }
            Op::Select { row, col } => {
                let (r, c) = pv(0).shape();
                let mut d = Mat::zeros(r, c);
                d[(*row, *col)] = g.item();
                vec![d]
            }
            Op::SoftmaxCrossEntropy { targets } => {
                let mut d = softmax_rows(pv(0));
                for (r, &t) in targets.iter().enumerate() {
                    d[(r, t)] -= 1.0;
                }
                vec![d.scale(g.item())]
            }
            Op::TraceProduct => vec![pv(1).scale(g.item()), pv(0).scale(g.item())],
            Op::FrobeniusNormalize { eps } => {
                let x = pv(0);
                let n = mat::frobenius_norm(x);
                let denom = n + eps;
                let mut d = g.scale(1.0 / denom);
                if n > 0.0 {
                    let coeff = mat::trace_product(g, x)? / (n * denom * denom);
                    d.axpy(-coeff, x)?;
                }
                vec![d]
            }
            Op::Sum => {
                let (r, c) = pv(0).shape();
                vec![Mat::filled(r, c, g.item())]
            }
            Op::StraightThrough { .. } => vec![g.clone()],
        })
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates `params` in place; `grads[i]` belongs to `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Mat], grads: &[&Mat]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::usage("adam: parameter/gradient count mismatch"));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Mat::zeros(p.rows(), p.cols())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() {
            return Err(Error::usage("adam: parameter set changed between steps"));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "adam: param {:?} vs grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *pj -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Gumbel noise `-ln(-ln(u))` for a uniform draw `u` in (0, 1).
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
    -(-u.ln()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Mat::new(rows, cols, data).unwrap()
    }

    /// Central-difference check of `build` w.r.t. every parameter entry.
    fn check(params: Vec<Mat>, build: impl Fn(&mut Tape, &[NodeId]) -> NodeId) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = build(&mut tape, &ids);
        let grads = tape.backward(loss).unwrap();

        let eval = |ps: &[Mat]| {
            let mut t = Tape::new();
            let ids: Vec<NodeId> = ps.iter().map(|p| t.param(p.clone())).collect();
            let l = build(&mut t, &ids);
            t.value(l).item()
        };
        let h = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            let g = grads.get(ids[pi]).unwrap();
            for k in 0..p.len() {
                let mut plus = params.clone();
                plus[pi].data_mut()[k] += h;
                let mut minus = params.clone();
                minus[pi].data_mut()[k] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = g.data()[k];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-4);
                assert!(rel <= 1e-4, "param {pi} entry {k}: analytic {an} vs fd {fd}");
            }
        }
    }

    #[test]
    fn record_appends_in_order() {
        let mut tape = Tape::new();
        let x = tape.constant(Mat::filled(2, 2, 1.5));
        let y = tape.record(Op::Add, &[x, x]).unwrap();
        assert_eq!(tape.value(y), &Mat::filled(2, 2, 3.0));
        let m = tape.record(Op::MatMul, &[x, y]).unwrap();
        assert_eq!(tape.node(m).parents, vec![x, y]);

        let before = tape.len();
        let mut last = m;
        let mut ids = Vec::new();
        for _ in 0..5 {
            last = tape.record(Op::Tanh, &[last]).unwrap();
            ids.push(last);
        }
        assert_eq!(tape.len(), before + 5);
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        for node in tape.nodes() {
            assert!(node.parents.iter().all(|p| *p < node.id));
        }
    }

    #[test]
    fn record_rejects_bad_usage() {
        assert!(matches!(Op::parse("conv2d"), Err(Error::Usage(_))));
        assert_eq!(Op::parse("matmul").unwrap(), Op::MatMul);
        let mut tape = Tape::new();
        let x = tape.constant(Mat::identity(2));
        assert!(matches!(tape.record(Op::Add, &[x]), Err(Error::Usage(_))));
        assert!(matches!(tape.record(Op::Leaf, &[]), Err(Error::Usage(_))));
        assert!(matches!(
            tape.record(Op::Tanh, &[NodeId(99)]),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn quadratic_form_gradient_is_identity_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(3, 4, &mut rng);
        let mut tape = Tape::new();
        let id = tape.param(a.clone());
        let tr = tape.record(Op::TraceProduct, &[id, id]).unwrap();
        let loss = tape.scale(tr, 0.5).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(id).unwrap().max_abs_diff(&a) < 1e-15);
    }

    #[test]
    fn scaled_sum_gradient_is_constant() {
        let mut tape = Tape::new();
        let x = tape.param(Mat::filled(2, 3, 0.7));
        let s = tape.scale(x, 2.5).unwrap();
        let loss = tape.sum(s).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &Mat::filled(2, 3, 2.5));
    }

    #[test]
    fn unreachable_params_get_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Mat::filled(1, 1, 2.0));
        let y = tape.param(Mat::filled(2, 2, 1.0));
        let loss = tape.scale(x, 3.0).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(y).unwrap(), &Mat::zeros(2, 2));
        assert_eq!(g.get(x).unwrap().item(), 3.0);
    }

    #[test]
    fn backward_requires_scalar_and_reset() {
        let mut tape = Tape::new();
        let x = tape.param(Mat::filled(2, 2, 1.0));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
        let loss = tape.sum(x).unwrap();
        let first = tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Usage(_))));
        tape.reset();
        let second = tape.backward(loss).unwrap();
        assert_eq!(first.get(x), second.get(x));
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let a = random(3, 4, &mut rng);
            let b = random(4, 2, &mut rng);
            let c = random(3, 4, &mut rng);
            let bias = random(1, 4, &mut rng);
            let s = random(1, 1, &mut rng);
            check(vec![a, b, c, bias, s], |t, p| {
                let ab = t.matmul(p[0], p[1]).unwrap();
                let abt = t.record(Op::Transpose, &[ab]).unwrap();
                let nt = t.matmul_nt(abt, abt).unwrap();
                let th = t.record(Op::Tanh, &[nt]).unwrap();
                let sq = t.record(Op::Hadamard, &[th, th]).unwrap();
                let biased = t.record(Op::AddRowBias, &[p[0], p[3]]).unwrap();
                let diff = t.record(Op::Sub, &[biased, p[2]]).unwrap();
                let sm = t.scalar_mul(p[4], diff).unwrap();
                let soft = t.record(Op::SoftmaxRows, &[sm]).unwrap();
                let sel = t.record(Op::Select { row: 1, col: 2 }, &[soft]).unwrap();
                let ce = t
                    .record(
                        Op::SoftmaxCrossEntropy {
                            targets: vec![0, 3, 1],
                        },
                        &[sm],
                    )
                    .unwrap();
                let nrm = t.record(Op::FrobeniusNormalize { eps: 0.01 }, &[p[2]]).unwrap();
                let tp = t.record(Op::TraceProduct, &[nrm, p[0]]).unwrap();
                let s1 = t.sum(sq).unwrap();
                t.add_all(&[s1, sel, ce, tp]).unwrap()
            });
        }
    }

    #[test]
    fn gumbel_gate_symmetric_and_saturated() {
        let mut tape = Tape::new();
        let l = tape.param(Mat::zeros(1, 2));
        let g = tape.st_gumbel_gate(l, [0.0, 0.0], 1.0).unwrap();
        assert_eq!(tape.value(g.soft).item(), 0.5);
        assert!(!g.hard, "ties resolve to no-injection");
        assert_eq!(tape.value(g.gate).item(), 0.0);

        let l = tape.param(Mat::row_vector(&[0.0, 10.0]).unwrap());
        let g = tape.st_gumbel_gate(l, [0.0, 0.0], 1.0).unwrap();
        assert!((tape.value(g.soft).item() - 0.9999546).abs() < 1e-7);
        assert!(g.hard);
        assert_eq!(tape.value(g.gate).item(), 1.0);

        assert!(matches!(
            tape.st_gumbel_gate(l, [0.0, 0.0], 0.0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn gumbel_gate_gradient_through_soft_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let logits = random(1, 2, &mut rng);
            let m = random(2, 2, &mut rng);
            let noise = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            // The soft path is smooth, so finite differences check it directly.
            check(vec![logits, m], move |t, p| {
                let g = t.st_gumbel_gate(p[0], noise, 0.7).unwrap();
                let sm = t.scalar_mul(g.soft, p[1]).unwrap();
                let th = t.record(Op::Tanh, &[sm]).unwrap();
                t.sum(th).unwrap()
            });
        }
    }

    #[test]
    fn straight_through_keeps_tape_structure() {
        // Same logits/noise; hard forward vs soft forward differ only in the
        // value carried by the straight-through node.
        let build = |hard_forward: bool| {
            let mut t = Tape::new();
            let l = t.param(Mat::row_vector(&[0.3, -0.2]).unwrap());
            let g = t.st_gumbel_gate(l, [0.1, 0.4], 1.0).unwrap();
            let used = if hard_forward { g.gate } else { g.soft };
            let c = t.constant(Mat::scalar(2.0));
            let prod = t.record(Op::Hadamard, &[used, c]).unwrap();
            let loss = t.sum(prod).unwrap();
            let grads = t.backward(loss).unwrap();
            (grads.get(l).unwrap().clone(), t.len())
        };
        let (hard_grad, hard_len) = build(true);
        let (soft_grad, soft_len) = build(false);
        assert_eq!(hard_len, soft_len);
        assert_eq!(hard_grad, soft_grad);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut p = Mat::filled(1, 3, 5.0);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = p.clone();
            opt.step(&mut [&mut p], &[&g]).unwrap();
        }
        assert!(p.data().iter().all(|v| v.abs() < 0.05), "{p:?}");
        assert_eq!(opt.steps_taken(), 500);
    }

    #[test]
    fn gumbel_noise_is_finite() {
        for u in [0.0, 1e-300, 0.5, 1.0 - 1e-16, 1.0] {
            assert!(gumbel_from_uniform(u).is_finite());
        }
    }
}
