//! Synthetic biased-propagation datasets with controllable environment bias.
//!
//! Each graph is a random tree whose node features carry the label along a
//! fixed causal direction. A chosen fraction of *training* graphs is
//! environment-biased: their features additionally carry the label along an
//! orthogonal bias direction, and their trees branch more heavily. Test
//! graphs always receive the bias component with a label-independent sign
//! (configurable to inverted or removed), so any model that leans on the
//! bias direction pays for it exactly once: at test time.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{CoreError, Result};
use crate::fmath;
use crate::graph::{Dataset, PropagationGraph};
use crate::tensor::Tensor2D;

const TAG_DIRECTIONS: u64 = 101;
const TAG_ASSIGN: u64 = 102;
const TAG_GRAPH: u64 = 103;

/// How test graphs treat the bias feature component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TestBiasMode {
    /// Bias component present with a label-independent sign.
    #[default]
    Independent,
    /// Bias component present with the sign always opposite the label's.
    Inverted,
    /// No bias component in test features.
    Removed,
}

/// Knobs of the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub feature_dim: usize,
    /// Fraction of training graphs that are environment-biased.
    pub bias_rate: f64,
    /// Magnitude of the label signal along the causal direction.
    pub causal_strength: f64,
    /// Magnitude of the label signal along the bias direction.
    pub bias_strength: f64,
    /// Per-node isotropic Gaussian noise scale.
    pub noise: f64,
    /// Mean children per node (truncated Poisson).
    pub branching_mean: f64,
    /// Branching multiplier applied to environment-biased graphs.
    pub bias_branch_mult: f64,
    /// Maximum node depth (root is depth 0).
    pub depth_max: usize,
    pub seed: u64,
    pub test_bias: TestBiasMode,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_train: 400,
            n_test: 200,
            feature_dim: 16,
            bias_rate: 0.3,
            causal_strength: 1.0,
            bias_strength: 2.0,
            noise: 1.0,
            branching_mean: 2.0,
            bias_branch_mult: 2.0,
            depth_max: 4,
            seed: 42,
            test_bias: TestBiasMode::Independent,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CoreError::InvalidConfig(msg));
        if self.n_train == 0 {
            return bad("n_train must be positive".into());
        }
        if self.feature_dim < 2 {
            return bad("feature_dim must be at least 2 for orthogonal directions".into());
        }
        if !(0.0..=1.0).contains(&self.bias_rate) {
            return bad(alloc::format!("bias_rate {} outside [0, 1]", self.bias_rate));
        }
        if !(self.causal_strength > 0.0) {
            return bad("causal_strength must be positive".into());
        }
        if !(self.bias_strength > 0.0) {
            return bad("bias_strength must be positive".into());
        }
        if !(self.noise > 0.0) {
            return bad("noise must be positive".into());
        }
        if !(self.branching_mean > 0.0) || !(self.bias_branch_mult > 0.0) {
            return bad("branching parameters must be positive".into());
        }
        Ok(())
    }
}

/// Generated train/test datasets plus ground-truth bias flags for training
/// graphs and the two feature directions (exposed for analysis and tests).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBundle {
    pub train: Dataset,
    pub test: Dataset,
    pub bias_flags: Vec<bool>,
    pub causal_direction: Vec<f64>,
    pub bias_direction: Vec<f64>,
}

fn unit_gaussian_vec(dim: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = fmath::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Two orthonormal directions derived from the seed (Gram-Schmidt).
fn orthonormal_pair(dim: usize, rng: &mut ChaCha12Rng) -> (Vec<f64>, Vec<f64>) {
    let mu = unit_gaussian_vec(dim, rng);
    let mut nu = unit_gaussian_vec(dim, rng);
    let dot: f64 = mu.iter().zip(&nu).map(|(a, b)| a * b).sum();
    for (n, m) in nu.iter_mut().zip(&mu) {
        *n -= dot * m;
    }
    let norm = fmath::sqrt(nu.iter().map(|x| x * x).sum::<f64>());
    for x in &mut nu {
        *x /= norm;
    }
    (mu, nu)
}

/// Child count: Poisson truncated at three times its mean.
fn truncated_poisson(mean: f64, rng: &mut ChaCha12Rng) -> usize {
    let cap = fmath::ceil(3.0 * mean) as usize;
    let draw: f64 = Poisson::new(mean)
        .expect("validated branching mean")
        .sample(rng);
    (draw as usize).min(cap)
}

/// Random tree rooted at node 0; returns directed parent -> child edges.
fn random_tree(mean_children: f64, depth_max: usize, rng: &mut ChaCha12Rng) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    // (node index, depth) frontier in BFS order.
    let mut frontier = vec![(0usize, 0usize)];
    let mut next_index = 1usize;
    while let Some((node, depth)) = frontier.pop() {
        if depth >= depth_max {
            continue;
        }
        let children = truncated_poisson(mean_children, rng);
        for _ in 0..children {
            edges.push((node, next_index));
            frontier.push((next_index, depth + 1));
            next_index += 1;
        }
    }
    edges
}

/// Exactly `count` trues among `len` slots, shuffled.
fn shuffled_flags(len: usize, count: usize, rng: &mut ChaCha12Rng) -> Vec<bool> {
    let mut flags = vec![false; len];
    for f in flags.iter_mut().take(count.min(len)) {
        *f = true;
    }
    flags.shuffle(rng);
    flags
}

/// Balanced labels: half the slots are 1 (rounded down), shuffled.
fn balanced_labels(len: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    let mut labels = vec![0usize; len];
    for l in labels.iter_mut().take(len / 2) {
        *l = 1;
    }
    labels.shuffle(rng);
    labels
}

struct GraphParams<'a> {
    label: usize,
    branch_mult: f64,
    /// Coefficient of the bias direction in this graph's features.
    bias_coeff: f64,
    mu: &'a [f64],
    nu: &'a [f64],
}

fn build_graph(
    id: String,
    spec: &SyntheticSpec,
    params: GraphParams<'_>,
    rng: &mut ChaCha12Rng,
) -> Result<PropagationGraph> {
    let edges = random_tree(spec.branching_mean * params.branch_mult, spec.depth_max, rng);
    let n = edges.len() + 1;
    let d = spec.feature_dim;
    let label_sign = if params.label == 1 { 1.0 } else { -1.0 };
    let mut features = Tensor2D::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let noise: f64 = StandardNormal.sample(rng);
            let v = spec.causal_strength * label_sign * params.mu[j]
                + params.bias_coeff * params.nu[j]
                + spec.noise * noise;
            features.set(i, j, v);
        }
    }
    PropagationGraph::new(id, features, edges, params.label, None, None)
}

/// Per-label-class sign assignment with an exactly even split, so the bias
/// component carries no information about the label.
fn independent_signs(labels: &[usize], rng: &mut ChaCha12Rng) -> Vec<f64> {
    let mut signs = vec![0.0f64; labels.len()];
    for class in 0..2 {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let flags = shuffled_flags(idx.len(), idx.len() / 2, rng);
        for (slot, &i) in idx.iter().enumerate() {
            signs[i] = if flags[slot] { 1.0 } else { -1.0 };
        }
    }
    signs
}

/// Generates a full bundle. Deterministic per spec (including the seed);
/// graphs may be generated in any order because every graph draws from its
/// own derived RNG stream.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticBundle> {
    spec.validate()?;
    let mut dir_rng = ChaCha12Rng::seed_from_u64(derive_seed(spec.seed, TAG_DIRECTIONS, 0, 0));
    let (mu, nu) = orthonormal_pair(spec.feature_dim, &mut dir_rng);

    let mut assign_rng = ChaCha12Rng::seed_from_u64(derive_seed(spec.seed, TAG_ASSIGN, 0, 0));
    let train_labels = balanced_labels(spec.n_train, &mut assign_rng);
    let biased_count = fmath::round(spec.bias_rate * spec.n_train as f64) as usize;
    let bias_flags = shuffled_flags(spec.n_train, biased_count, &mut assign_rng);
    let test_labels = balanced_labels(spec.n_test, &mut assign_rng);
    let test_signs = independent_signs(&test_labels, &mut assign_rng);

    let mut train_graphs = Vec::with_capacity(spec.n_train);
    for i in 0..spec.n_train {
        let biased = bias_flags[i];
        let label = train_labels[i];
        let label_sign = if label == 1 { 1.0 } else { -1.0 };
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(spec.seed, TAG_GRAPH, 0, i as u64));
        let graph = build_graph(
            alloc::format!("train-{i:04}"),
            spec,
            GraphParams {
                label,
                branch_mult: if biased { spec.bias_branch_mult } else { 1.0 },
                bias_coeff: if biased {
                    spec.bias_strength * label_sign
                } else {
                    0.0
                },
                mu: &mu,
                nu: &nu,
            },
            &mut rng,
        )?;
        train_graphs.push(graph);
    }

    let mut test_graphs = Vec::with_capacity(spec.n_test);
    for i in 0..spec.n_test {
        let label = test_labels[i];
        let label_sign = if label == 1 { 1.0 } else { -1.0 };
        let bias_coeff = match spec.test_bias {
            TestBiasMode::Independent => spec.bias_strength * test_signs[i],
            TestBiasMode::Inverted => -spec.bias_strength * label_sign,
            TestBiasMode::Removed => 0.0,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(spec.seed, TAG_GRAPH, 1, i as u64));
        let graph = build_graph(
            alloc::format!("test-{i:04}"),
            spec,
            GraphParams {
                label,
                branch_mult: 1.0,
                bias_coeff,
                mu: &mu,
                nu: &nu,
            },
            &mut rng,
        )?;
        test_graphs.push(graph);
    }

    Ok(SyntheticBundle {
        train: Dataset::new(train_graphs)?,
        test: Dataset::new(test_graphs)?,
        bias_flags,
        causal_direction: mu,
        bias_direction: nu,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;

    #[test]
    fn directions_are_orthonormal() {
        let spec = SyntheticSpec {
            n_train: 4,
            n_test: 2,
            ..SyntheticSpec::default()
        };
        let bundle = generate(&spec).unwrap();
        let dot: f64 = bundle
            .causal_direction
            .iter()
            .zip(&bundle.bias_direction)
            .map(|(a, b)| a * b)
            .sum();
        assert!(dot.abs() < 1e-10, "dot={dot}");
        for dir in [&bundle.causal_direction, &bundle.bias_direction] {
            let norm: f64 = dir.iter().map(|x| x * x).sum::<f64>();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bias_flag_count_is_exact() {
        let spec = SyntheticSpec {
            n_train: 50,
            n_test: 10,
            bias_rate: 0.3,
            ..SyntheticSpec::default()
        };
        let bundle = generate(&spec).unwrap();
        assert_eq!(bundle.bias_flags.iter().filter(|&&b| b).count(), 15);
        assert_eq!(bundle.bias_flags.len(), bundle.train.len());
    }

    #[test]
    fn graphs_are_connected_trees_rooted_at_zero() {
        let spec = SyntheticSpec {
            n_train: 30,
            n_test: 10,
            ..SyntheticSpec::default()
        };
        let bundle = generate(&spec).unwrap();
        for g in bundle.train.graphs.iter().chain(&bundle.test.graphs) {
            g.validate().unwrap();
            let n = g.node_count();
            assert_eq!(g.edges.len(), n - 1, "tree edge count");
            assert_eq!(g.root, 0);
            // Every non-root node has exactly one parent; reachable from root.
            let mut parent = vec![usize::MAX; n];
            for &(src, dst) in &g.edges {
                assert_eq!(parent[dst], usize::MAX, "node {dst} has two parents");
                parent[dst] = src;
            }
            assert_eq!(parent[0], usize::MAX);
            let mut reached = BTreeSet::new();
            for mut node in 1..n {
                let mut hops = 0;
                while node != 0 {
                    node = parent[node];
                    assert!(node != usize::MAX);
                    hops += 1;
                    assert!(hops <= n, "cycle detected");
                }
                reached.insert(hops);
            }
            // Depth bound holds.
            assert!(*reached.iter().max().unwrap_or(&0) <= spec.depth_max);
        }
    }

    #[test]
    fn same_seed_reproduces_identical_bundles() {
        let spec = SyntheticSpec {
            n_train: 20,
            n_test: 8,
            ..SyntheticSpec::default()
        };
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = SyntheticSpec { seed: 43, ..spec };
        assert_ne!(generate(&spec).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn biased_training_graphs_branch_more_on_average() {
        let spec = SyntheticSpec {
            n_train: 200,
            n_test: 4,
            ..SyntheticSpec::default()
        };
        let bundle = generate(&spec).unwrap();
        let mut biased_nodes = 0.0;
        let mut biased_count = 0.0;
        let mut clean_nodes = 0.0;
        let mut clean_count = 0.0;
        for (g, &flag) in bundle.train.graphs.iter().zip(&bundle.bias_flags) {
            if flag {
                biased_nodes += g.node_count() as f64;
                biased_count += 1.0;
            } else {
                clean_nodes += g.node_count() as f64;
                clean_count += 1.0;
            }
        }
        assert!(biased_nodes / biased_count > 2.0 * clean_nodes / clean_count);
    }

    #[test]
    fn rejects_invalid_specs() {
        let mut spec = SyntheticSpec::default();
        spec.bias_rate = 1.5;
        assert!(generate(&spec).is_err());
        let mut spec = SyntheticSpec::default();
        spec.feature_dim = 1;
        assert!(generate(&spec).is_err());
        let mut spec = SyntheticSpec::default();
        spec.n_train = 0;
        assert!(generate(&spec).is_err());
    }
}
