//! Propagation graphs, datasets, and the symmetric-normalized adjacency.

use alloc::collections::BTreeSet;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fmath;
use crate::tensor::Tensor2D;
use crate::{derive_seed, seed_tags};

/// Number of veracity classes (true news / fake news).
pub const LABEL_COUNT: usize = 2;

/// One news event: a post plus its comments and reposts.
///
/// Edges are stored directed (parent -> child) because the structure
/// estimator scores ordered pairs; the GCN adjacency symmetrizes them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationGraph {
    pub id: String,
    /// `n x d` node feature matrix, one row per post.
    pub features: Tensor2D,
    /// Directed parent -> child index pairs.
    pub edges: Vec<(usize, usize)>,
    /// 0 = true news, 1 = fake news.
    pub label: usize,
    /// Optional source-domain tag; analysis only, never used in training.
    pub domain: Option<String>,
    /// Index of the source post.
    pub root: usize,
}

impl PropagationGraph {
    /// Builds and validates a graph. `root` defaults to node 0.
    pub fn new(
        id: String,
        features: Tensor2D,
        edges: Vec<(usize, usize)>,
        label: usize,
        domain: Option<String>,
        root: Option<usize>,
    ) -> Result<Self> {
        let graph = Self {
            id,
            features,
            edges,
            label,
            domain,
            root: root.unwrap_or(0),
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn node_count(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    fn invalid(&self, reason: alloc::string::String) -> CoreError {
        CoreError::InvalidGraph {
            id: Some(self.id.clone()),
            reason,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.node_count();
        if n == 0 {
            return Err(self.invalid("graph has no nodes".into()));
        }
        if self.feature_dim() == 0 {
            return Err(self.invalid("feature dimension must be at least 1".into()));
        }
        if !self.features.is_finite() {
            return Err(self.invalid("non-finite feature entry".into()));
        }
        if self.root >= n {
            return Err(self.invalid(alloc::format!("root {} out of range", self.root)));
        }
        let mut seen = BTreeSet::new();
        for &(src, dst) in &self.edges {
            if src >= n || dst >= n {
                return Err(self.invalid(alloc::format!(
                    "edge endpoint out of range: ({src}, {dst}) with {n} nodes"
                )));
            }
            if src == dst {
                return Err(self.invalid(alloc::format!("self-loop at node {src}")));
            }
            if !seen.insert((src, dst)) {
                return Err(self.invalid(alloc::format!("duplicate edge ({src}, {dst})")));
            }
        }
        Ok(())
    }
}

/// An ordered collection of propagation graphs with a shared feature width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub graphs: Vec<PropagationGraph>,
    pub feature_dim: usize,
    pub label_count: usize,
}

impl Dataset {
    pub fn new(graphs: Vec<PropagationGraph>) -> Result<Self> {
        let feature_dim = graphs
            .first()
            .map(PropagationGraph::feature_dim)
            .unwrap_or(0);
        let ds = Self {
            graphs,
            feature_dim,
            label_count: LABEL_COUNT,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for g in &self.graphs {
            g.validate()?;
            if g.feature_dim() != self.feature_dim {
                return Err(CoreError::InvalidDataset(alloc::format!(
                    "graph '{}' has feature dim {} but dataset has {}",
                    g.id,
                    g.feature_dim(),
                    self.feature_dim
                )));
            }
            if g.label >= self.label_count {
                return Err(CoreError::InvalidDataset(alloc::format!(
                    "graph '{}' has label {} outside [0, {})",
                    g.id,
                    g.label,
                    self.label_count
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }
}

/// The symmetric-normalized adjacency with self-loops used by the GCN:
/// `D^{-1/2} (A_sym + I) D^{-1/2}` where `D` is the degree matrix of
/// `A_sym + I`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    matrix: Tensor2D,
}

impl NormalizedAdjacency {
    pub fn matrix(&self) -> &Tensor2D {
        &self.matrix
    }

    pub fn node_count(&self) -> usize {
        self.matrix.rows()
    }
}

/// Sparse row storage of the same normalized adjacency. Values are identical
/// to the dense form; only the representation differs.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrAdjacency {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrAdjacency {
    pub fn node_count(&self) -> usize {
        self.n
    }

    /// Sparse view of a dense square matrix, keeping exact nonzero values.
    pub fn from_dense(matrix: &Tensor2D) -> Rc<Self> {
        let n = matrix.rows();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for i in 0..n {
            for (j, &v) in matrix.row(i).iter().enumerate() {
                if v != 0.0 {
                    col_idx.push(j);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Rc::new(Self {
            n,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// `A * x` for dense row-major `x` with matching row count.
    pub fn spmm(&self, x: &Tensor2D) -> Result<Tensor2D> {
        if x.rows() != self.n {
            return Err(CoreError::ShapeMismatch {
                op: "spmm",
                lhs_rows: self.n,
                lhs_cols: self.n,
                rhs_rows: x.rows(),
                rhs_cols: x.cols(),
            });
        }
        let cols = x.cols();
        let mut out = Tensor2D::zeros(self.n, cols);
        for i in 0..self.n {
            let out_row = &mut out.data_mut()[i * cols..(i + 1) * cols];
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k];
                let v = self.values[k];
                let x_row = x.row(j);
                for (o, &xv) in out_row.iter_mut().zip(x_row) {
                    *o += v * xv;
                }
            }
        }
        if out.is_finite() {
            Ok(out)
        } else {
            Err(CoreError::NonFinite { op: "spmm" })
        }
    }

    pub fn to_dense(&self) -> Tensor2D {
        let mut out = Tensor2D::zeros(self.n, self.n);
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                out.set(i, self.col_idx[k], self.values[k]);
            }
        }
        out
    }
}

/// Symmetrized neighbor lists with self-loops and the normalization weights
/// `(deg_i * deg_j)^{-1/2}` shared by the dense and sparse builders.
fn neighbor_lists(graph: &PropagationGraph) -> (Vec<BTreeSet<usize>>, Vec<f64>) {
    let n = graph.node_count();
    let mut neighbors: Vec<BTreeSet<usize>> = (0..n).map(|i| BTreeSet::from([i])).collect();
    for &(src, dst) in &graph.edges {
        neighbors[src].insert(dst);
        neighbors[dst].insert(src);
    }
    let inv_sqrt_deg: Vec<f64> = neighbors
        .iter()
        .map(|adj| 1.0 / fmath::sqrt(adj.len() as f64))
        .collect();
    (neighbors, inv_sqrt_deg)
}

/// Dense symmetric-normalized adjacency of a validated graph.
///
/// Edge direction is ignored: reversing any stored edge yields the same
/// matrix, because symmetrization happens before normalization.
pub fn normalize_adjacency(graph: &PropagationGraph) -> Result<NormalizedAdjacency> {
    graph.validate()?;
    let (neighbors, inv_sqrt_deg) = neighbor_lists(graph);
    let n = graph.node_count();
    let mut matrix = Tensor2D::zeros(n, n);
    for (i, adj) in neighbors.iter().enumerate() {
        for &j in adj {
            matrix.set(i, j, inv_sqrt_deg[i] * inv_sqrt_deg[j]);
        }
    }
    Ok(NormalizedAdjacency { matrix })
}

/// Sparse form of [`normalize_adjacency`], shared across training epochs.
pub fn normalize_adjacency_csr(graph: &PropagationGraph) -> Result<Rc<CsrAdjacency>> {
    graph.validate()?;
    let (neighbors, inv_sqrt_deg) = neighbor_lists(graph);
    let n = graph.node_count();
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    row_ptr.push(0);
    for (i, adj) in neighbors.iter().enumerate() {
        for &j in adj {
            col_idx.push(j);
            values.push(inv_sqrt_deg[i] * inv_sqrt_deg[j]);
        }
        row_ptr.push(col_idx.len());
    }
    Ok(Rc::new(CsrAdjacency {
        n,
        row_ptr,
        col_idx,
        values,
    }))
}

/// Splits a dataset into train and validation parts, stratified by label.
///
/// Per class, `round(val_fraction * count)` graphs go to validation. The
/// split is deterministic for a fixed seed and the two parts are disjoint.
pub fn split_dataset(
    dataset: &Dataset,
    val_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if dataset.is_empty() {
        return Err(CoreError::InvalidDataset("cannot split an empty dataset".into()));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(CoreError::InvalidConfig(alloc::format!(
            "val_fraction {val_fraction} outside [0, 1)"
        )));
    }
    let mut by_label: Vec<Vec<usize>> = alloc::vec![Vec::new(); dataset.label_count];
    for (i, g) in dataset.graphs.iter().enumerate() {
        by_label[g.label].push(i);
    }
    let mut val_indices: BTreeSet<usize> = BTreeSet::new();
    for (label, indices) in by_label.iter_mut().enumerate() {
        let mut rng =
            ChaCha12Rng::seed_from_u64(derive_seed(seed, seed_tags::SPLIT, label as u64, 0));
        indices.shuffle(&mut rng);
        let take = fmath::round(val_fraction * indices.len() as f64) as usize;
        val_indices.extend(indices.iter().take(take).copied());
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, g) in dataset.graphs.iter().enumerate() {
        if val_indices.contains(&i) {
            val.push(g.clone());
        } else {
            train.push(g.clone());
        }
    }
    if train.is_empty() {
        return Err(CoreError::InvalidConfig(alloc::format!(
            "val_fraction {val_fraction} leaves the training split empty"
        )));
    }
    Ok((
        Dataset {
            graphs: train,
            feature_dim: dataset.feature_dim,
            label_count: dataset.label_count,
        },
        Dataset {
            graphs: val,
            feature_dim: dataset.feature_dim,
            label_count: dataset.label_count,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    pub(crate) fn graph_with_edges(n: usize, edges: &[(usize, usize)]) -> PropagationGraph {
        let features = Tensor2D::from_vec(n, 1, (0..n).map(|i| i as f64).collect()).unwrap();
        PropagationGraph::new(
            "test".to_string(),
            features,
            edges.to_vec(),
            0,
            None,
            None,
        )
        .unwrap()
    }

    #[test]
    fn single_node_normalizes_to_identity() {
        let g = graph_with_edges(1, &[]);
        let adj = normalize_adjacency(&g).unwrap();
        assert_eq!(adj.matrix().data(), &[1.0]);
    }

    #[test]
    fn two_node_edge_gives_uniform_half_matrix() {
        let g = graph_with_edges(2, &[(0, 1)]);
        let adj = normalize_adjacency(&g).unwrap();
        for &v in adj.matrix().data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn direction_does_not_matter() {
        let fwd = graph_with_edges(4, &[(0, 1), (1, 2), (1, 3)]);
        let rev = graph_with_edges(4, &[(1, 0), (2, 1), (3, 1)]);
        assert_eq!(
            normalize_adjacency(&fwd).unwrap().matrix(),
            normalize_adjacency(&rev).unwrap().matrix()
        );
    }

    #[test]
    fn csr_matches_dense() {
        let g = graph_with_edges(6, &[(0, 1), (0, 2), (1, 3), (1, 4), (2, 5)]);
        let dense = normalize_adjacency(&g).unwrap();
        let csr = normalize_adjacency_csr(&g).unwrap();
        assert_eq!(&csr.to_dense(), dense.matrix());
    }

    #[test]
    fn spmm_matches_dense_matmul() {
        let g = graph_with_edges(5, &[(0, 1), (0, 2), (2, 3), (3, 4)]);
        let csr = normalize_adjacency_csr(&g).unwrap();
        let x = Tensor2D::from_vec(5, 3, (0..15).map(|i| i as f64 * 0.25 - 1.0).collect()).unwrap();
        let want = crate::tensor::matmul(&csr.to_dense(), &x).unwrap();
        let got = csr.spmm(&x).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_out_of_range_and_self_loops_and_duplicates() {
        let features = Tensor2D::zeros(2, 1);
        let out_of_range = PropagationGraph::new(
            "g".into(),
            features.clone(),
            vec![(0, 5)],
            0,
            None,
            None,
        );
        assert!(matches!(out_of_range, Err(CoreError::InvalidGraph { .. })));
        let self_loop =
            PropagationGraph::new("g".into(), features.clone(), vec![(1, 1)], 0, None, None);
        assert!(self_loop.is_err());
        let dup = PropagationGraph::new(
            "g".into(),
            features,
            vec![(0, 1), (0, 1)],
            0,
            None,
            None,
        );
        assert!(dup.is_err());
    }

    #[test]
    fn dataset_rejects_inconsistent_dims_and_labels() {
        let g1 = graph_with_edges(2, &[(0, 1)]);
        let mut g2 = graph_with_edges(2, &[(0, 1)]);
        g2.features = Tensor2D::zeros(2, 3);
        assert!(Dataset::new(vec![g1.clone(), g2]).is_err());
        let mut g3 = g1.clone();
        g3.label = 2;
        assert!(Dataset::new(vec![g1, g3]).is_err());
    }

    fn labeled_dataset(per_class: usize) -> Dataset {
        let mut graphs = Vec::new();
        for label in 0..2 {
            for i in 0..per_class {
                let mut g = graph_with_edges(2, &[(0, 1)]);
                g.id = alloc::format!("g{label}_{i}");
                g.label = label;
                graphs.push(g);
            }
        }
        Dataset::new(graphs).unwrap()
    }

    #[test]
    fn split_zero_fraction_returns_everything_in_train() {
        let ds = labeled_dataset(3);
        let (train, val) = split_dataset(&ds, 0.0, 1).unwrap();
        assert_eq!(train.len(), 6);
        assert_eq!(val.len(), 0);
    }

    #[test]
    fn split_is_stratified() {
        let ds = labeled_dataset(5);
        let (train, val) = split_dataset(&ds, 0.2, 3).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(val.len(), 2);
        let val_labels: Vec<_> = val.graphs.iter().map(|g| g.label).collect();
        assert!(val_labels.contains(&0) && val_labels.contains(&1));
    }

    #[test]
    fn split_is_deterministic() {
        let ds = labeled_dataset(8);
        let a = split_dataset(&ds, 0.25, 9).unwrap();
        let b = split_dataset(&ds, 0.25, 9).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }
}
