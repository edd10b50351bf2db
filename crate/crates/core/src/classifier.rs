//! The p(y | X, A, e) branch: two residual GCN layers over the normalized
//! adjacency, mean pooling, and a one-hidden-layer MLP with softmax output.
//!
//! Layer update: `Z(l+1) = relu(A_hat Z(l) W(l)) + Z(l)` with `Z(0) = X W_in`.
//! The learned input projection keeps the residual stream at a fixed width
//! even when the raw feature dimension differs. The e=0 branch is a constant
//! reference distribution and never touches the parameters.

use alloc::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{CoreError, Result};
use crate::fmath;
use crate::graph::{CsrAdjacency, NormalizedAdjacency, PropagationGraph, LABEL_COUNT};
use crate::params::{glorot_uniform, ParamStore};
use crate::posterior::{log_std_normal, E0Mode, EnvBranch};
use crate::tape::{NodeId, StagedParams, Tape};
use crate::tensor::Tensor2D;

pub const W_IN: &str = "cls.w_in";
pub const W0: &str = "cls.w0";
pub const W1: &str = "cls.w1";
pub const M1: &str = "cls.m1";
pub const B1: &str = "cls.b1";
pub const M2: &str = "cls.m2";
pub const B2: &str = "cls.b2";

/// Layer widths of the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassifierDims {
    pub feature_dim: usize,
    pub hidden: usize,
    pub mlp_hidden: usize,
    pub classes: usize,
}

impl ClassifierDims {
    pub fn new(feature_dim: usize, hidden: usize) -> Self {
        Self {
            feature_dim,
            hidden,
            mlp_hidden: hidden,
            classes: LABEL_COUNT,
        }
    }
}

/// Typed, shape-checked view of the classifier parameters in a store.
pub struct ClassifierParams<'a> {
    pub w_in: &'a Tensor2D,
    pub w0: &'a Tensor2D,
    pub w1: &'a Tensor2D,
    pub m1: &'a Tensor2D,
    pub b1: &'a Tensor2D,
    pub m2: &'a Tensor2D,
    pub b2: &'a Tensor2D,
}

impl<'a> ClassifierParams<'a> {
    pub fn from_store(store: &'a ParamStore) -> Result<Self> {
        let view = Self {
            w_in: store.get(W_IN)?,
            w0: store.get(W0)?,
            w1: store.get(W1)?,
            m1: store.get(M1)?,
            b1: store.get(B1)?,
            m2: store.get(M2)?,
            b2: store.get(B2)?,
        };
        let h = view.w_in.cols();
        // Residual connections require square GCN weights on the stream width.
        if view.w0.shape() != (h, h) || view.w1.shape() != (h, h) {
            return Err(CoreError::ParamStore(
                "GCN weights must be square on the residual width".into(),
            ));
        }
        if view.m1.rows() != h
            || view.b1.shape() != (1, view.m1.cols())
            || view.m2.rows() != view.m1.cols()
            || view.b2.shape() != (1, view.m2.cols())
        {
            return Err(CoreError::ParamStore("MLP shapes are inconsistent".into()));
        }
        Ok(view)
    }

    pub fn dims(&self) -> ClassifierDims {
        ClassifierDims {
            feature_dim: self.w_in.rows(),
            hidden: self.w_in.cols(),
            mlp_hidden: self.m1.cols(),
            classes: self.m2.cols(),
        }
    }
}

/// Inserts freshly initialized classifier parameters into the store
/// (Glorot-uniform weights, zero biases).
pub fn init_classifier_params(
    store: &mut ParamStore,
    dims: &ClassifierDims,
    rng: &mut ChaCha12Rng,
) -> Result<()> {
    store.insert(W_IN, glorot_uniform(dims.feature_dim, dims.hidden, rng))?;
    store.insert(W0, glorot_uniform(dims.hidden, dims.hidden, rng))?;
    store.insert(W1, glorot_uniform(dims.hidden, dims.hidden, rng))?;
    store.insert(M1, glorot_uniform(dims.hidden, dims.mlp_hidden, rng))?;
    store.insert(B1, Tensor2D::zeros(1, dims.mlp_hidden))?;
    store.insert(M2, glorot_uniform(dims.mlp_hidden, dims.classes, rng))?;
    store.insert(B2, Tensor2D::zeros(1, dims.classes))?;
    Ok(())
}

/// Optional inverted-dropout applied to hidden activations during training.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha12Rng,
}

fn apply_dropout(
    tape: &mut Tape,
    node: NodeId,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<NodeId> {
    let Some(d) = dropout else { return Ok(node) };
    if d.rate <= 0.0 {
        return Ok(node);
    }
    let (rows, cols) = tape.value(node).shape();
    let keep = 1.0 - d.rate;
    let mut mask = Tensor2D::zeros(rows, cols);
    for v in mask.data_mut() {
        *v = if d.rng.random::<f64>() < d.rate {
            0.0
        } else {
            1.0 / keep
        };
    }
    let mask_node = tape.constant(mask);
    tape.mul_elem(node, mask_node)
}

/// Builds the classifier forward pass on a tape and returns the logits node
/// (`1 x classes`).
pub fn logits_on_tape(
    tape: &mut Tape,
    features: NodeId,
    adj: &Rc<CsrAdjacency>,
    staged: &StagedParams,
    mut dropout: Option<Dropout<'_>>,
) -> Result<NodeId> {
    let w_in = staged.get(W_IN)?;
    let w0 = staged.get(W0)?;
    let w1 = staged.get(W1)?;
    let m1 = staged.get(M1)?;
    let b1 = staged.get(B1)?;
    let m2 = staged.get(M2)?;
    let b2 = staged.get(B2)?;

    let z0 = tape.matmul(features, w_in)?;
    let mut z = z0;
    for w in [w0, w1] {
        let mixed = tape.spmm_sym(adj, z)?;
        let pre = tape.matmul(mixed, w)?;
        let act = tape.relu(pre)?;
        let act = apply_dropout(tape, act, &mut dropout)?;
        z = tape.add(act, z)?;
    }
    let pooled = tape.mean_rows(z)?;
    let h1_pre = tape.matmul(pooled, m1)?;
    let h1_pre = tape.add_bias_row(h1_pre, b1)?;
    let h1 = tape.relu(h1_pre)?;
    let h1 = apply_dropout(tape, h1, &mut dropout)?;
    let logits = tape.matmul(h1, m2)?;
    tape.add_bias_row(logits, b2)
}

fn stage_and_forward(
    graph: &PropagationGraph,
    adj: &Rc<CsrAdjacency>,
    store: &ParamStore,
) -> Result<(Tape, NodeId)> {
    ClassifierParams::from_store(store)?;
    if adj.node_count() != graph.node_count() {
        return Err(CoreError::InvalidGraph {
            id: Some(graph.id.clone()),
            reason: "adjacency node count differs from graph".into(),
        });
    }
    let mut tape = Tape::new();
    let staged = tape.stage_params(store);
    let x = tape.constant(graph.features.clone());
    let logits = logits_on_tape(&mut tape, x, adj, &staged, None)?;
    Ok((tape, logits))
}

/// Class probability vector (`1 x classes`) for one graph.
pub fn forward(
    graph: &PropagationGraph,
    adj: &NormalizedAdjacency,
    store: &ParamStore,
) -> Result<Tensor2D> {
    let csr = dense_to_csr(adj);
    forward_csr(graph, &csr, store)
}

/// [`forward`] against a pre-built sparse adjacency.
pub fn forward_csr(
    graph: &PropagationGraph,
    adj: &Rc<CsrAdjacency>,
    store: &ParamStore,
) -> Result<Tensor2D> {
    let (mut tape, logits) = stage_and_forward(graph, adj, store)?;
    let probs = tape.softmax_rows(logits)?;
    Ok(tape.value(probs).clone())
}

/// Node embeddings `Z(2)` (`n x hidden`) after both residual layers.
pub fn node_embeddings(
    graph: &PropagationGraph,
    adj: &NormalizedAdjacency,
    store: &ParamStore,
) -> Result<Tensor2D> {
    ClassifierParams::from_store(store)?;
    let csr = dense_to_csr(adj);
    let mut tape = Tape::new();
    let staged = tape.stage_params(store);
    let x = tape.constant(graph.features.clone());
    let w_in = staged.get(W_IN)?;
    let w0 = staged.get(W0)?;
    let w1 = staged.get(W1)?;
    let z0 = tape.matmul(x, w_in)?;
    let mut z = z0;
    for w in [w0, w1] {
        let mixed = tape.spmm_sym(&csr, z)?;
        let pre = tape.matmul(mixed, w)?;
        let act = tape.relu(pre)?;
        z = tape.add(act, z)?;
    }
    Ok(tape.value(z).clone())
}

/// Log-likelihood `log p(y = label | X, A, e)` for one graph.
///
/// The e=1 branch is the log-softmax probability under the model. The e=0
/// branch is a parameter-free constant: `Uniform` gives `ln(1/classes)`;
/// `GaussianLogit` scores the e=1 true-class logit under a standard normal
/// density, detached from the parameters.
pub fn label_loglik(
    graph: &PropagationGraph,
    adj: &NormalizedAdjacency,
    label: usize,
    store: &ParamStore,
    branch: EnvBranch,
    mode: E0Mode,
) -> Result<f64> {
    let view = ClassifierParams::from_store(store)?;
    let classes = view.dims().classes;
    if label >= classes {
        return Err(CoreError::InvalidConfig(alloc::format!(
            "label {label} outside [0, {classes})"
        )));
    }
    let csr = dense_to_csr(adj);
    let (mut tape, logits) = stage_and_forward(graph, &csr, store)?;
    match branch {
        EnvBranch::Independent => {
            let nll = tape.nll_from_logits(logits, &[label])?;
            Ok(-tape.value(nll).item()?)
        }
        EnvBranch::Biased => Ok(label_loglik_e0(tape.value(logits), label, classes, mode)),
    }
}

/// The constant e=0 label log-likelihood, given the (detached) e=1 logits.
pub(crate) fn label_loglik_e0(
    logits: &Tensor2D,
    label: usize,
    classes: usize,
    mode: E0Mode,
) -> f64 {
    match mode {
        E0Mode::Uniform => -fmath::ln(classes as f64),
        E0Mode::GaussianLogit => log_std_normal(logits.get(0, label)),
    }
}

pub(crate) fn dense_to_csr(adj: &NormalizedAdjacency) -> Rc<CsrAdjacency> {
    CsrAdjacency::from_dense(adj.matrix())
}
