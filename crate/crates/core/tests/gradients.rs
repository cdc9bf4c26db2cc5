mod common;

use common::GradProblem;
use skillbase::adapter::orthogonality_value;
use skillbase::engine::{joint_loss, GateMode};
use skillbase::model::{nll_value, Injection};
use skillbase::tape::Tape;

#[test]
fn joint_loss_matches_central_differences() {
    for seed in 0..20 {
        let p = GradProblem::new(seed, 8, 2, 2);
        let err = p.max_relative_error(1e-5);
        assert!(err < 1e-4, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn straight_through_forward_uses_hard_gates() {
    let p = GradProblem::new(7, 10, 3, 2);
    let mut tape = Tape::new();
    let jl = joint_loss(
        &mut tape,
        &p.model,
        &p.features,
        &p.targets,
        &p.adapter,
        Some((GateMode::StraightThrough, &p.noise, p.tau)),
        &p.priors,
        &p.weights,
    )
    .unwrap();
    assert_eq!(jl.hard.len(), 3);
    let grads = tape.backward(jl.total).unwrap();
    // Gradient still reaches the logits through the soft path.
    for &id in &jl.logits {
        assert!(grads.get(id).unwrap().data().iter().any(|g| *g != 0.0));
    }
    // Forward value: hard gates in the model, soft probabilities in L_s.
    let gates: Vec<f64> = jl.hard.iter().map(|&h| if h { 1.0 } else { 0.0 }).collect();
    let logits = p
        .model
        .forward_features(&p.features, &Injection::from_adapter_with_gates(&p.adapter, &gates))
        .unwrap();
    let nll = nll_value(&logits, &p.targets).unwrap() / p.targets.len() as f64;
    let bs: Vec<_> = p.adapter.pairs.iter().map(|q| q.b.clone()).collect();
    let r = orthogonality_value(&bs, &p.priors, p.weights.eps).unwrap();
    let soft: f64 = p
        .adapter
        .gate_logits
        .iter()
        .zip(&p.noise)
        .map(|(l, n)| {
            let (x0, x1) = ((l[(0, 0)] + n[0]) / p.tau, (l[(0, 1)] + n[1]) / p.tau);
            1.0 / (1.0 + (x0 - x1).exp())
        })
        .sum();
    let expected = nll + p.weights.lambda * r + p.weights.lambda_s * soft;
    assert!((tape.value(jl.total).item() - expected).abs() < 1e-10);
}

#[test]
fn nll_is_averaged_over_tokens() {
    let p = GradProblem::new(1, 8, 2, 2);
    let mut tape = Tape::new();
    let mut w = p.weights;
    w.lambda = 0.0;
    w.lambda_s = 0.0;
    let jl = joint_loss(&mut tape, &p.model, &p.features, &p.targets, &p.adapter, None, &[], &w).unwrap();
    let logits = p
        .model
        .forward_features(&p.features, &Injection::from_adapter_with_gates(&p.adapter, &[1.0, 1.0]))
        .unwrap();
    let summed = nll_value(&logits, &p.targets).unwrap();
    assert!((tape.value(jl.total).item() - summed / p.targets.len() as f64).abs() < 1e-12);
}
