//! Central finite-difference verification of every training loss.
//!
//! The oracle freezes the posterior `q` and the e=0 constants at the base
//! parameters (exactly what the M-step optimizes), then recomputes the
//! e=1 log-likelihoods through the public value-path operations for each
//! perturbed parameter entry. The tape gradients must agree entry-wise.

use graphdebias_core::classifier::{self};
use graphdebias_core::estimator::{self, PairSample};
use graphdebias_core::graph::{normalize_adjacency, normalize_adjacency_csr, PropagationGraph};
use graphdebias_core::posterior::{
    classification_loss, infer_posterior, kl_loss, structure_loss, total_loss, weighted_loss_on_tape,
    E0Mode, EnvBranch, EnvPosterior, PriorConfig,
};
use graphdebias_core::tape::Tape;
use graphdebias_core::train::{init_params, TrainConfig};
use graphdebias_core::{ParamStore, Tensor2D};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

const FD_EPS: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;

struct Instance {
    graphs: Vec<PropagationGraph>,
    pairs: Vec<PairSample>,
    config: TrainConfig,
    prior: PriorConfig,
}

fn random_graph(rng: &mut ChaCha12Rng, id: usize, dim: usize) -> PropagationGraph {
    let n = rng.random_range(2..=6);
    let mut features = Tensor2D::zeros(n, dim);
    for v in features.data_mut() {
        *v = rng.random_range(-1.5..1.5);
    }
    // Random tree so every graph is valid and has at least one edge.
    let edges = (1..n)
        .map(|child| (rng.random_range(0..child), child))
        .collect();
    PropagationGraph::new(
        format!("fd-{id}"),
        features,
        edges,
        rng.random_range(0..2),
        None,
        None,
    )
    .unwrap()
}

fn make_instance(seed: u64, e0_mode: E0Mode, normalize_pairs: bool) -> (Instance, ParamStore) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let dim = rng.random_range(3..=8);
    let config = TrainConfig {
        hidden: rng.random_range(2..=8),
        estimator_hidden: rng.random_range(2..=4),
        e0_mode,
        normalize_pairs,
        prior_e: rng.random_range(0.2..0.9),
        seed,
        ..TrainConfig::default()
    };
    let graphs: Vec<PropagationGraph> = (0..3).map(|i| random_graph(&mut rng, i, dim)).collect();
    let pairs = graphs
        .iter()
        .map(|g| estimator::sample_negatives(g, seed ^ 0xabc).unwrap())
        .collect();
    let mut params = init_params(dim, &config).unwrap();
    // Zero-initialized output layers have degenerate gradients; randomize
    // every parameter so the check exercises generic positions.
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in names {
        let t = params.get(&name).unwrap();
        let mut fresh = Tensor2D::zeros(t.rows(), t.cols());
        for v in fresh.data_mut() {
            *v = rng.random_range(-0.6..0.6);
        }
        params.set(&name, fresh).unwrap();
    }
    let prior = config.prior().unwrap();
    (
        Instance {
            graphs,
            pairs,
            config,
            prior,
        },
        params,
    )
}

/// e=1 log-likelihood vectors recomputed through the public value paths.
fn branch_values(inst: &Instance, params: &ParamStore) -> (Vec<f64>, Vec<f64>) {
    let mut ll_y1 = Vec::new();
    let mut ll_a1 = Vec::new();
    for (g, pairs) in inst.graphs.iter().zip(&inst.pairs) {
        let adj = normalize_adjacency(g).unwrap();
        ll_y1.push(
            classifier::label_loglik(
                g,
                &adj,
                g.label,
                params,
                EnvBranch::Independent,
                inst.config.e0_mode,
            )
            .unwrap(),
        );
        ll_a1.push(
            estimator::structure_loglik(
                g,
                pairs,
                params,
                EnvBranch::Independent,
                inst.config.e0_mode,
                inst.config.normalize_pairs,
            )
            .unwrap(),
        );
    }
    (ll_y1, ll_a1)
}

/// e=0 constants at the base parameters.
fn frozen_e0(inst: &Instance, params: &ParamStore) -> (Vec<f64>, Vec<f64>) {
    let mut ll_y0 = Vec::new();
    let mut ll_a0 = Vec::new();
    for (g, pairs) in inst.graphs.iter().zip(&inst.pairs) {
        let adj = normalize_adjacency(g).unwrap();
        ll_y0.push(
            classifier::label_loglik(g, &adj, g.label, params, EnvBranch::Biased, inst.config.e0_mode)
                .unwrap(),
        );
        ll_a0.push(
            estimator::structure_loglik(
                g,
                pairs,
                params,
                EnvBranch::Biased,
                inst.config.e0_mode,
                inst.config.normalize_pairs,
            )
            .unwrap(),
        );
    }
    (ll_y0, ll_a0)
}

#[derive(Clone, Copy, PartialEq)]
enum LossKind {
    Classification,
    Structure,
    Kl,
    Total,
}

fn loss_value(
    kind: LossKind,
    inst: &Instance,
    params: &ParamStore,
    q: &EnvPosterior,
    frozen: &(Vec<f64>, Vec<f64>),
) -> f64 {
    let (ll_y1, ll_a1) = branch_values(inst, params);
    let l_cl = classification_loss(q, &ll_y1, &frozen.0).unwrap();
    let l_reg = structure_loss(q, &ll_a1, &frozen.1).unwrap();
    let l_kl = kl_loss(q, &inst.prior).unwrap();
    match kind {
        LossKind::Classification => l_cl,
        LossKind::Structure => l_reg,
        LossKind::Kl => l_kl,
        LossKind::Total => total_loss(l_cl, l_reg, l_kl, &inst.prior),
    }
}

/// Tape gradients of the same loss at the base parameters.
fn tape_gradients(
    kind: LossKind,
    inst: &Instance,
    params: &ParamStore,
    q: &EnvPosterior,
    frozen: &(Vec<f64>, Vec<f64>),
) -> graphdebias_core::Gradients {
    let mut tape = Tape::new();
    let staged = tape.stage_params(params);
    let mut ll_y1_nodes = Vec::new();
    let mut ll_a1_nodes = Vec::new();
    for (g, pairs) in inst.graphs.iter().zip(&inst.pairs) {
        let adj = normalize_adjacency_csr(g).unwrap();
        let x = tape.constant(g.features.clone());
        let logits = classifier::logits_on_tape(&mut tape, x, &adj, &staged, None).unwrap();
        let nll = tape.nll_from_logits(logits, &[g.label]).unwrap();
        ll_y1_nodes.push(tape.scale(nll, -1.0).unwrap());
        let scores = estimator::scores_on_tape(&mut tape, x, pairs, &staged).unwrap();
        ll_a1_nodes
            .push(estimator::structure_loglik_on_tape(&mut tape, &scores, inst.config.normalize_pairs).unwrap());
    }
    let cl = weighted_loss_on_tape(&mut tape, q, &ll_y1_nodes, &frozen.0).unwrap();
    let reg = weighted_loss_on_tape(&mut tape, q, &ll_a1_nodes, &frozen.1).unwrap();
    match kind {
        LossKind::Classification => tape.backward(cl, params).unwrap(),
        LossKind::Structure => tape.backward(reg, params).unwrap(),
        // KL has no parameter dependence: q is detached.
        LossKind::Kl => graphdebias_core::Gradients::zeros_like(params),
        LossKind::Total => tape
            .backward_weighted(&[(cl, 1.0), (reg, 1.0)], params)
            .unwrap(),
    }
}

fn check_instance(seed: u64, e0_mode: E0Mode, normalize_pairs: bool) -> f64 {
    let (inst, base) = make_instance(seed, e0_mode, normalize_pairs);
    let frozen = frozen_e0(&inst, &base);
    let (ll_y1, ll_a1) = branch_values(&inst, &base);
    let q = infer_posterior(&ll_y1, &ll_a1, &frozen.0, &frozen.1, &inst.prior).unwrap();

    let mut worst = 0.0f64;
    for kind in [
        LossKind::Classification,
        LossKind::Structure,
        LossKind::Kl,
        LossKind::Total,
    ] {
        let grads = tape_gradients(kind, &inst, &base, &q, &frozen);
        let names: Vec<String> = base.names().map(String::from).collect();
        for name in &names {
            let tensor = base.get(name).unwrap().clone();
            let grad = grads.get(name).unwrap().clone();
            for idx in 0..tensor.data().len() {
                let mut plus = base.clone();
                let mut t = tensor.clone();
                t.data_mut()[idx] += FD_EPS;
                plus.set(name, t).unwrap();
                let mut minus = base.clone();
                let mut t = tensor.clone();
                t.data_mut()[idx] -= FD_EPS;
                minus.set(name, t).unwrap();
                let fd = (loss_value(kind, &inst, &plus, &q, &frozen)
                    - loss_value(kind, &inst, &minus, &q, &frozen))
                    / (2.0 * FD_EPS);
                let ad = grad.data()[idx];
                let rel = (fd - ad).abs() / f64::max(fd.abs().max(ad.abs()), 1e-6);
                worst = worst.max(rel);
                assert!(
                    rel < TOLERANCE,
                    "seed {seed} param {name}[{idx}] fd={fd} ad={ad} rel={rel}"
                );
            }
        }
    }
    worst
}

#[test]
fn gradients_match_central_differences_uniform_mode() {
    for seed in [1u64, 2, 3] {
        check_instance(seed, E0Mode::Uniform, false);
    }
}

#[test]
fn gradients_match_central_differences_gaussian_logit_mode() {
    check_instance(11, E0Mode::GaussianLogit, false);
    check_instance(12, E0Mode::GaussianLogit, true);
}

#[test]
fn gradients_match_central_differences_normalized_pairs() {
    check_instance(21, E0Mode::Uniform, true);
}

/// The e=0 branch is constant: zeroing its values changes the loss value but
/// not the gradient.
#[test]
fn e0_constants_do_not_affect_gradients() {
    let (inst, base) = make_instance(31, E0Mode::Uniform, false);
    let frozen = frozen_e0(&inst, &base);
    let (ll_y1, ll_a1) = branch_values(&inst, &base);
    let q = infer_posterior(&ll_y1, &ll_a1, &frozen.0, &frozen.1, &inst.prior).unwrap();
    let zeroed = (vec![0.0; frozen.0.len()], vec![0.0; frozen.1.len()]);
    let g1 = tape_gradients(LossKind::Total, &inst, &base, &q, &frozen);
    let g2 = tape_gradients(LossKind::Total, &inst, &base, &q, &zeroed);
    for (name, t) in g1.iter() {
        assert_eq!(t, g2.get(name).unwrap(), "gradient differs for {name}");
    }
    let v1 = loss_value(LossKind::Total, &inst, &base, &q, &frozen);
    let v2 = loss_value(LossKind::Total, &inst, &base, &q, &zeroed);
    assert!((v1 - v2).abs() > 1e-9, "loss value should shift");
}
