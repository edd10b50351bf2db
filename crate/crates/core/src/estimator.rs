//! The p(A | X, e) branch: per-pair edge probabilities from node features.
//!
//! An ordered pair (i, j) scores `sigmoid([U x_i, U x_j]^T omega)`. Pairs are
//! treated as conditionally independent, so a graph's structure
//! log-likelihood is the sum over its directed edges plus an equally sized
//! sample of directed non-edges; without the negative sample the trivial
//! all-edges solution would maximize the likelihood.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{CoreError, Result};
use crate::fmath;
use crate::graph::PropagationGraph;
use crate::params::{glorot_uniform, ParamStore};
use crate::posterior::{log_std_normal, E0Mode, EnvBranch};
use crate::tape::{NodeId, StagedParams, Tape};
use crate::tensor::Tensor2D;

pub const U: &str = "est.u";
pub const OMEGA: &str = "est.omega";

/// Widths of the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EstimatorDims {
    pub feature_dim: usize,
    pub hidden: usize,
}

/// Typed, shape-checked view of the estimator parameters in a store.
pub struct EstimatorParams<'a> {
    /// `d x h` projection applied to each node feature row.
    pub u: &'a Tensor2D,
    /// `2h x 1` weight over the concatenated pair projection.
    pub omega: &'a Tensor2D,
}

impl<'a> EstimatorParams<'a> {
    pub fn from_store(store: &'a ParamStore) -> Result<Self> {
        let view = Self {
            u: store.get(U)?,
            omega: store.get(OMEGA)?,
        };
        if view.omega.shape() != (2 * view.u.cols(), 1) {
            return Err(CoreError::ParamStore(
                "estimator weight must have length twice the projection width".into(),
            ));
        }
        Ok(view)
    }
}

/// Inserts freshly initialized estimator parameters into the store
/// (Glorot-uniform weights).
pub fn init_estimator_params(
    store: &mut ParamStore,
    dims: &EstimatorDims,
    rng: &mut ChaCha12Rng,
) -> Result<()> {
    store.insert(U, glorot_uniform(dims.feature_dim, dims.hidden, rng))?;
    store.insert(OMEGA, glorot_uniform(2 * dims.hidden, 1, rng))?;
    Ok(())
}

/// Probability in (0, 1) of a directed edge i -> j given the two feature rows.
pub fn edge_prob(x_i: &[f64], x_j: &[f64], store: &ParamStore) -> Result<f64> {
    let view = EstimatorParams::from_store(store)?;
    let d = view.u.rows();
    if x_i.len() != d || x_j.len() != d {
        return Err(CoreError::ShapeMismatch {
            op: "edge_prob",
            lhs_rows: 1,
            lhs_cols: x_i.len(),
            rhs_rows: d,
            rhs_cols: view.u.cols(),
        });
    }
    let h = view.u.cols();
    let mut score = 0.0;
    for c in 0..h {
        let mut pi = 0.0;
        let mut pj = 0.0;
        for r in 0..d {
            pi += x_i[r] * view.u.get(r, c);
            pj += x_j[r] * view.u.get(r, c);
        }
        score += pi * view.omega.get(c, 0) + pj * view.omega.get(h + c, 0);
    }
    if !score.is_finite() {
        return Err(CoreError::NonFinite { op: "edge_prob" });
    }
    Ok(fmath::sigmoid(score))
}

/// A graph's directed edges plus an equal number of sampled directed
/// non-edges.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
    /// How many negatives could not be drawn because the non-edge pool was
    /// smaller than the positive count.
    pub shortfall: usize,
    /// Set when the graph admits no ordered pairs at all (single node).
    pub degenerate: bool,
}

impl PairSample {
    pub fn pair_count(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }
}

/// Draws the negative half of a [`PairSample`], deterministically per seed.
///
/// Negatives are directed non-edges: no self-pairs, no stored edges, no
/// duplicates. If the pool is smaller than the positive count the whole pool
/// is used and the shortfall recorded.
pub fn sample_negatives(graph: &PropagationGraph, seed: u64) -> Result<PairSample> {
    graph.validate()?;
    let n = graph.node_count();
    let positives = graph.edges.clone();
    if n < 2 {
        return Ok(PairSample {
            positives,
            negatives: Vec::new(),
            shortfall: 0,
            degenerate: true,
        });
    }
    let m = positives.len();
    let edge_set: BTreeSet<(usize, usize)> = positives.iter().copied().collect();
    let pool = n * (n - 1) - edge_set.len();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut negatives = Vec::with_capacity(m.min(pool));
    if pool <= m || n <= 64 {
        // Small pool: enumerate every candidate and take a shuffled prefix.
        let mut candidates: Vec<(usize, usize)> = Vec::with_capacity(pool);
        for i in 0..n {
            for j in 0..n {
                if i != j && !edge_set.contains(&(i, j)) {
                    candidates.push((i, j));
                }
            }
        }
        use rand::seq::SliceRandom;
        candidates.shuffle(&mut rng);
        candidates.truncate(m);
        negatives = candidates;
    } else {
        // Large sparse pool: rejection sampling.
        let mut chosen = BTreeSet::new();
        while negatives.len() < m {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i == j || edge_set.contains(&(i, j)) || !chosen.insert((i, j)) {
                continue;
            }
            negatives.push((i, j));
        }
    }
    let shortfall = m.saturating_sub(negatives.len());
    Ok(PairSample {
        positives,
        negatives,
        shortfall,
        degenerate: false,
    })
}

/// Pair scores staged on a tape: raw logits for positives and negatives.
pub struct PairScores {
    pub positive: NodeId,
    pub negative: NodeId,
}

fn pair_scores_on_tape(
    tape: &mut Tape,
    features: NodeId,
    pairs: &[(usize, usize)],
    u: NodeId,
    omega: NodeId,
) -> Result<NodeId> {
    let projected = tape.matmul(features, u)?;
    let src: Vec<usize> = pairs.iter().map(|&(i, _)| i).collect();
    let dst: Vec<usize> = pairs.iter().map(|&(_, j)| j).collect();
    let p_src = tape.gather_rows(projected, &src)?;
    let p_dst = tape.gather_rows(projected, &dst)?;
    let cat = tape.concat_cols(p_src, p_dst)?;
    tape.matmul(cat, omega)
}

/// Builds the pair scores for a sample on a tape.
pub fn scores_on_tape(
    tape: &mut Tape,
    features: NodeId,
    pairs: &PairSample,
    staged: &StagedParams,
) -> Result<PairScores> {
    let u = staged.get(U)?;
    let omega = staged.get(OMEGA)?;
    Ok(PairScores {
        positive: pair_scores_on_tape(tape, features, &pairs.positives, u, omega)?,
        negative: pair_scores_on_tape(tape, features, &pairs.negatives, u, omega)?,
    })
}

/// e=1 structure log-likelihood node:
/// `sum log sigmoid(s_pos) + sum log sigmoid(-s_neg)`, optionally divided by
/// the pair count.
pub fn structure_loglik_on_tape(
    tape: &mut Tape,
    scores: &PairScores,
    normalize_pairs: bool,
) -> Result<NodeId> {
    let pos_ll = tape.log_sigmoid(scores.positive)?;
    let pos_sum = tape.sum_all(pos_ll)?;
    let neg_flipped = tape.scale(scores.negative, -1.0)?;
    let neg_ll = tape.log_sigmoid(neg_flipped)?;
    let neg_sum = tape.sum_all(neg_ll)?;
    let total = tape.add(pos_sum, neg_sum)?;
    let count = tape.value(scores.positive).rows() + tape.value(scores.negative).rows();
    if normalize_pairs && count > 0 {
        tape.scale(total, 1.0 / count as f64)
    } else {
        Ok(total)
    }
}

/// The constant e=0 structure log-likelihood for a sample.
///
/// `Uniform` treats each pair as Bernoulli(1/2); `GaussianLogit` scores the
/// detached raw pair logits under a standard normal density.
pub fn structure_loglik_e0(
    pos_scores: &Tensor2D,
    neg_scores: &Tensor2D,
    mode: E0Mode,
    normalize_pairs: bool,
) -> f64 {
    let count = pos_scores.rows() + neg_scores.rows();
    let total = match mode {
        E0Mode::Uniform => count as f64 * fmath::ln(0.5),
        E0Mode::GaussianLogit => pos_scores
            .data()
            .iter()
            .chain(neg_scores.data())
            .map(|&s| log_std_normal(s))
            .sum(),
    };
    if normalize_pairs && count > 0 {
        total / count as f64
    } else {
        total
    }
}

/// Structure log-likelihood of a graph under either branch.
pub fn structure_loglik(
    graph: &PropagationGraph,
    pairs: &PairSample,
    store: &ParamStore,
    branch: EnvBranch,
    mode: E0Mode,
    normalize_pairs: bool,
) -> Result<f64> {
    EstimatorParams::from_store(store)?;
    validate_pairs(graph, pairs)?;
    let mut tape = Tape::new();
    let staged = tape.stage_params(store);
    let x = tape.constant(graph.features.clone());
    let scores = scores_on_tape(&mut tape, x, pairs, &staged)?;
    match branch {
        EnvBranch::Independent => {
            let node = structure_loglik_on_tape(&mut tape, &scores, normalize_pairs)?;
            tape.scalar_value(node)
        }
        EnvBranch::Biased => Ok(structure_loglik_e0(
            tape.value(scores.positive),
            tape.value(scores.negative),
            mode,
            normalize_pairs,
        )),
    }
}

fn validate_pairs(graph: &PropagationGraph, pairs: &PairSample) -> Result<()> {
    let n = graph.node_count();
    for &(i, j) in pairs.positives.iter().chain(&pairs.negatives) {
        if i >= n || j >= n {
            return Err(CoreError::InvalidGraph {
                id: Some(graph.id.clone()),
                reason: alloc::format!("pair endpoint out of range: ({i}, {j})"),
            });
        }
    }
    Ok(())
}
