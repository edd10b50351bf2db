//! EM training loop, early stopping, and test-time prediction.
//!
//! Each step processes one mini-batch: the E-step evaluates both branch
//! log-likelihoods for every graph under the current parameters and forms
//! the closed-form environment posterior `q` (a plain number per graph); the
//! M-step takes one Adam step on the `q`-weighted loss with `q` held fixed.
//! Prediction always conditions on e=1: the posterior machinery exists only
//! at training time.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{self, ClassifierDims, Dropout};
use crate::error::{CoreError, Result};
use crate::estimator::{self, EstimatorDims};
use crate::graph::{
    normalize_adjacency_csr, split_dataset, CsrAdjacency, Dataset, PropagationGraph,
};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::posterior::{
    classification_loss, infer_posterior, kl_loss, structure_loss, total_loss,
    weighted_loss_on_tape, EnvPosterior, PriorConfig,
};
use crate::tape::{NodeId, StagedParams, Tape};
use crate::{derive_seed, seed_tags};

pub use crate::posterior::E0Mode;

/// When the environment posterior is refreshed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EStepGranularity {
    /// Recompute q for each mini-batch from the parameters it will update.
    #[default]
    Batch,
    /// Compute q once per epoch for the whole training split.
    Epoch,
}

/// Full training configuration. Every run artifact echoes this struct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// GCN residual-stream width (also the MLP hidden width).
    pub hidden: usize,
    /// Structure-estimator projection width.
    pub estimator_hidden: usize,
    /// Prior p(e=1).
    pub prior_e: f64,
    pub lambda_kl: f64,
    pub e0_mode: E0Mode,
    /// +1 adds the KL divergence to the minimized loss; -1 is the literal
    /// sign ablation. Affects only the reported total (q is detached).
    pub kl_sign: i8,
    pub seed: u64,
    /// Epochs without validation-accuracy improvement before stopping.
    pub patience: usize,
    pub val_fraction: f64,
    /// Fix q to 1 everywhere: plain likelihood training, no KL term.
    pub no_debias: bool,
    pub e_step: EStepGranularity,
    /// Divide structure log-likelihoods by their pair count.
    pub normalize_pairs: bool,
    pub weight_decay: f64,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 5e-3,
            hidden: 64,
            estimator_hidden: 32,
            prior_e: 0.7,
            lambda_kl: 1.0,
            e0_mode: E0Mode::Uniform,
            kl_sign: 1,
            seed: 42,
            patience: 20,
            val_fraction: 0.1,
            no_debias: false,
            e_step: EStepGranularity::Batch,
            normalize_pairs: false,
            weight_decay: 0.0,
            dropout: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(CoreError::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive and finite".into());
        }
        if self.hidden == 0 || self.estimator_hidden == 0 {
            return bad("hidden widths must be positive".into());
        }
        if self.kl_sign != 1 && self.kl_sign != -1 {
            return bad(alloc::format!("kl_sign {} must be +1 or -1", self.kl_sign));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(alloc::format!(
                "val_fraction {} outside [0, 1)",
                self.val_fraction
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(alloc::format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be finite and non-negative".into());
        }
        self.prior()?;
        Ok(())
    }

    pub fn prior(&self) -> Result<PriorConfig> {
        PriorConfig::new(self.prior_e, self.lambda_kl)
    }
}

/// Loss values and validation accuracy for one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub l_cl: f64,
    pub l_reg: f64,
    pub l_kl: f64,
    pub total: f64,
    pub val_accuracy: Option<f64>,
}

/// Per-epoch history plus the final environment posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    /// Posterior q for every graph of the input dataset, in input order,
    /// under the returned parameters. Identically 1 in no-debias mode.
    pub final_q: Vec<f64>,
    /// Epoch whose validation accuracy selected the returned parameters.
    pub best_epoch: Option<usize>,
}

impl TrainReport {
    pub fn epochs_run(&self) -> usize {
        self.history.len()
    }
}

/// Zeroes the output projections (classifier head and pair weight), giving
/// the symmetric configuration: uniform class probabilities, edge
/// probability 1/2 everywhere, and a posterior equal to the prior.
pub fn symmetrize_outputs(store: &mut ParamStore) -> Result<()> {
    for name in [classifier::M2, classifier::B2, estimator::OMEGA] {
        let t = store.get(name)?;
        let zero = crate::tensor::Tensor2D::zeros(t.rows(), t.cols());
        store.set(name, zero)?;
    }
    Ok(())
}

/// Initializes all model parameters for the given feature dimension.
pub fn init_params(feature_dim: usize, config: &TrainConfig) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(config.seed, seed_tags::INIT, 0, 0));
    classifier::init_classifier_params(
        &mut store,
        &ClassifierDims::new(feature_dim, config.hidden),
        &mut rng,
    )?;
    estimator::init_estimator_params(
        &mut store,
        &EstimatorDims {
            feature_dim,
            hidden: config.estimator_hidden,
        },
        &mut rng,
    )?;
    Ok(store)
}

/// Both branch log-likelihoods of one graph, staged on a shared tape.
struct GraphTerms {
    ll_y1: NodeId,
    ll_a1: NodeId,
    ll_y1_val: f64,
    ll_a1_val: f64,
    ll_y0_val: f64,
    ll_a0_val: f64,
}

fn graph_terms(
    tape: &mut Tape,
    staged: &StagedParams,
    graph: &PropagationGraph,
    adj: &Rc<CsrAdjacency>,
    config: &TrainConfig,
    neg_seed: u64,
    dropout_rng: Option<&mut ChaCha12Rng>,
) -> Result<GraphTerms> {
    let x = tape.constant(graph.features.clone());
    let dropout = dropout_rng.map(|rng| Dropout {
        rate: config.dropout,
        rng,
    });
    let logits = classifier::logits_on_tape(tape, x, adj, staged, dropout)?;
    let nll = tape.nll_from_logits(logits, &[graph.label])?;
    let ll_y1 = tape.scale(nll, -1.0)?;
    let pairs = estimator::sample_negatives(graph, neg_seed)?;
    let scores = estimator::scores_on_tape(tape, x, &pairs, staged)?;
    let ll_a1 = estimator::structure_loglik_on_tape(tape, &scores, config.normalize_pairs)?;
    let classes = tape.value(logits).cols();
    let ll_y0_val =
        classifier::label_loglik_e0(tape.value(logits), graph.label, classes, config.e0_mode);
    let ll_a0_val = estimator::structure_loglik_e0(
        tape.value(scores.positive),
        tape.value(scores.negative),
        config.e0_mode,
        config.normalize_pairs,
    );
    Ok(GraphTerms {
        ll_y1,
        ll_a1,
        ll_y1_val: tape.scalar_value(ll_y1)?,
        ll_a1_val: tape.scalar_value(ll_a1)?,
        ll_y0_val,
        ll_a0_val,
    })
}

/// The environment posterior of every graph in `dataset` under `params`.
///
/// Negative pairs are drawn from the `epoch_tag` stream, so reports and the
/// inspection command agree when given the same tag.
pub fn compute_env_posterior(
    dataset: &Dataset,
    params: &ParamStore,
    config: &TrainConfig,
    epoch_tag: u64,
) -> Result<Vec<f64>> {
    let prior = config.prior()?;
    let mut q = Vec::with_capacity(dataset.len());
    for (i, graph) in dataset.graphs.iter().enumerate() {
        let adj = normalize_adjacency_csr(graph)?;
        let mut tape = Tape::new();
        let staged = tape.stage_params(params);
        let neg_seed = derive_seed(config.seed, seed_tags::NEGATIVE, epoch_tag, i as u64);
        let terms = graph_terms(&mut tape, &staged, graph, &adj, config, neg_seed, None)?;
        let post = infer_posterior(
            &[terms.ll_y1_val],
            &[terms.ll_a1_val],
            &[terms.ll_y0_val],
            &[terms.ll_a0_val],
            &prior,
        )?;
        q.push(post.as_slice()[0]);
    }
    Ok(q)
}

/// Argmax prediction with e=1; ties break toward the lowest label index.
pub fn predict(graph: &PropagationGraph, params: &ParamStore) -> Result<(usize, Vec<f64>)> {
    let adj = normalize_adjacency_csr(graph)?;
    let probs = classifier::forward_csr(graph, &adj, params)?;
    let row = probs.row(0);
    let mut best = 0;
    for (j, &p) in row.iter().enumerate().skip(1) {
        if p > row[best] {
            best = j;
        }
    }
    Ok((best, row.to_vec()))
}

/// Fraction of graphs whose argmax prediction matches the label.
pub fn accuracy(dataset: &Dataset, params: &ParamStore) -> Result<f64> {
    if dataset.is_empty() {
        return Err(CoreError::InvalidDataset(
            "accuracy over an empty dataset".into(),
        ));
    }
    let mut correct = 0usize;
    for graph in &dataset.graphs {
        let (label, _) = predict(graph, params)?;
        if label == graph.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

struct EarlyStopper {
    best_acc: f64,
    best_epoch: usize,
    snapshot: Option<ParamStore>,
    stale: usize,
}

/// Trains on `train_ds` and returns the selected parameters and the report.
///
/// When a validation split exists, the parameters with the best validation
/// accuracy are returned (earliest epoch on ties); otherwise the final ones.
pub fn train(train_ds: &Dataset, config: &TrainConfig) -> Result<(ParamStore, TrainReport)> {
    config.validate()?;
    if train_ds.is_empty() {
        return Err(CoreError::InvalidDataset("empty training dataset".into()));
    }
    train_ds.validate()?;
    let prior = config.prior()?;
    let (fit_ds, val_ds) = split_dataset(train_ds, config.val_fraction, config.seed)?;
    let mut params = init_params(train_ds.feature_dim, config)?;
    let mut adam = AdamState::new(&params);
    adam.weight_decay = config.weight_decay;

    let adjacencies: Vec<Rc<CsrAdjacency>> = fit_ds
        .graphs
        .iter()
        .map(normalize_adjacency_csr)
        .collect::<Result<_>>()?;

    let n_fit = fit_ds.len();
    let mut history: Vec<EpochStats> = Vec::with_capacity(config.epochs);
    let mut stopper = EarlyStopper {
        best_acc: f64::NEG_INFINITY,
        best_epoch: 0,
        snapshot: None,
        stale: 0,
    };

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n_fit).collect();
        let mut shuffle_rng = ChaCha12Rng::seed_from_u64(derive_seed(
            config.seed,
            seed_tags::SHUFFLE,
            epoch as u64,
            0,
        ));
        order.shuffle(&mut shuffle_rng);

        // Per-epoch E-step: one posterior for the whole split, if configured.
        let epoch_q: Option<Vec<f64>> =
            if !config.no_debias && config.e_step == EStepGranularity::Epoch {
                Some(compute_env_posterior(&fit_ds, &params, config, epoch as u64)?)
            } else {
                None
            };

        let mut sums = (0.0, 0.0, 0.0, 0.0);
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let mut tape = Tape::new();
            let staged = tape.stage_params(&params);
            let mut terms = Vec::with_capacity(batch.len());
            for &gi in batch {
                let graph = &fit_ds.graphs[gi];
                let neg_seed =
                    derive_seed(config.seed, seed_tags::NEGATIVE, epoch as u64, gi as u64);
                let mut dropout_rng = if config.dropout > 0.0 {
                    Some(ChaCha12Rng::seed_from_u64(derive_seed(
                        config.seed,
                        seed_tags::DROPOUT,
                        epoch as u64,
                        gi as u64,
                    )))
                } else {
                    None
                };
                terms.push(graph_terms(
                    &mut tape,
                    &staged,
                    graph,
                    &adjacencies[gi],
                    config,
                    neg_seed,
                    dropout_rng.as_mut(),
                )?);
            }

            let ll_y1_vals: Vec<f64> = terms.iter().map(|t| t.ll_y1_val).collect();
            let ll_a1_vals: Vec<f64> = terms.iter().map(|t| t.ll_a1_val).collect();
            let ll_y0_vals: Vec<f64> = terms.iter().map(|t| t.ll_y0_val).collect();
            let ll_a0_vals: Vec<f64> = terms.iter().map(|t| t.ll_a0_val).collect();

            // E-step: q is a constant for the M-step that follows.
            let q = if config.no_debias {
                EnvPosterior::all_ones(batch.len())
            } else {
                match &epoch_q {
                    Some(all) => {
                        let picked: Vec<f64> = batch.iter().map(|&gi| all[gi]).collect();
                        EnvPosterior::from_vec_unchecked(picked)
                    }
                    None => infer_posterior(&ll_y1_vals, &ll_a1_vals, &ll_y0_vals, &ll_a0_vals, &prior)?,
                }
            };

            let l_cl = classification_loss(&q, &ll_y1_vals, &ll_y0_vals)?;
            let l_reg = structure_loss(&q, &ll_a1_vals, &ll_a0_vals)?;
            let l_kl = if config.no_debias {
                0.0
            } else {
                kl_loss(&q, &prior)?
            };
            let total = if config.no_debias {
                l_cl + l_reg
            } else {
                total_loss(l_cl, l_reg, config.kl_sign as f64 * l_kl, &prior)
            };
            if !total.is_finite() {
                return Err(CoreError::Diverged {
                    epoch,
                    batch: batch_idx,
                });
            }

            // M-step: gradients flow only through the q-weighted e=1 terms.
            let ll_y1_nodes: Vec<NodeId> = terms.iter().map(|t| t.ll_y1).collect();
            let ll_a1_nodes: Vec<NodeId> = terms.iter().map(|t| t.ll_a1).collect();
            let cl_node = weighted_loss_on_tape(&mut tape, &q, &ll_y1_nodes, &ll_y0_vals)?;
            let reg_node = weighted_loss_on_tape(&mut tape, &q, &ll_a1_nodes, &ll_a0_vals)?;
            let loss_node = tape.add(cl_node, reg_node)?;
            let grads = tape.backward(loss_node, &params)?;
            adam.step(&mut params, &grads, config.lr)?;

            let w = batch.len() as f64;
            sums.0 += l_cl * w;
            sums.1 += l_reg * w;
            sums.2 += l_kl * w;
            sums.3 += total * w;
        }

        let val_accuracy = if val_ds.is_empty() {
            None
        } else {
            Some(accuracy(&val_ds, &params)?)
        };
        history.push(EpochStats {
            l_cl: sums.0 / n_fit as f64,
            l_reg: sums.1 / n_fit as f64,
            l_kl: sums.2 / n_fit as f64,
            total: sums.3 / n_fit as f64,
            val_accuracy,
        });

        if let Some(acc) = val_accuracy {
            if acc > stopper.best_acc {
                stopper.best_acc = acc;
                stopper.best_epoch = history.len() - 1;
                stopper.snapshot = Some(params.clone());
                stopper.stale = 0;
            } else {
                stopper.stale += 1;
                if stopper.stale >= config.patience {
                    break;
                }
            }
        }
    }

    let best_epoch = stopper.snapshot.as_ref().map(|_| stopper.best_epoch);
    if let Some(best) = stopper.snapshot {
        params = best;
    }

    let final_q = if config.no_debias {
        vec![1.0; train_ds.len()]
    } else {
        compute_env_posterior(train_ds, &params, config, config.epochs as u64)?
    };

    Ok((
        params,
        TrainReport {
            history,
            final_q,
            best_epoch,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Dataset, PropagationGraph};
    use crate::synth::{generate, SyntheticSpec};
    use crate::tensor::Tensor2D;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 5,
            batch_size: 8,
            hidden: 8,
            estimator_hidden: 4,
            lr: 0.01,
            val_fraction: 0.0,
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset() -> Dataset {
        let spec = SyntheticSpec {
            n_train: 24,
            n_test: 4,
            feature_dim: 4,
            depth_max: 2,
            ..SyntheticSpec::default()
        };
        generate(&spec).unwrap().train
    }

    #[test]
    fn zero_epochs_returns_initialized_params_and_empty_history() {
        let ds = tiny_dataset();
        let config = TrainConfig {
            epochs: 0,
            ..tiny_config()
        };
        let (params, report) = train(&ds, &config).unwrap();
        assert!(report.history.is_empty());
        assert_eq!(report.best_epoch, None);
        assert_eq!(params, init_params(ds.feature_dim, &config).unwrap());
        assert_eq!(report.final_q.len(), ds.len());
    }

    #[test]
    fn fixed_seed_reproduces_identical_reports() {
        let ds = tiny_dataset();
        let config = tiny_config();
        let (p1, r1) = train(&ds, &config).unwrap();
        let (p2, r2) = train(&ds, &config).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(r1, r2);
    }

    #[test]
    fn untrained_posterior_sits_at_the_prior() {
        let ds = tiny_dataset();
        let config = tiny_config();
        let mut params = init_params(ds.feature_dim, &config).unwrap();
        // Symmetric configuration: both branches coincide, q = p_e.
        symmetrize_outputs(&mut params).unwrap();
        let q = compute_env_posterior(&ds, &params, &config, 0).unwrap();
        for &qi in &q {
            assert!((qi - config.prior_e).abs() < 1e-12, "q={qi}");
        }
    }

    #[test]
    fn predict_is_pure_and_breaks_ties_low() {
        let ds = tiny_dataset();
        let config = tiny_config();
        let mut params = init_params(ds.feature_dim, &config).unwrap();
        symmetrize_outputs(&mut params).unwrap();
        let g = &ds.graphs[0];
        // Zero output layer: uniform probabilities, tie broken toward 0.
        let (label, probs) = predict(g, &params).unwrap();
        assert_eq!(label, 0);
        assert_eq!(probs, alloc::vec![0.5, 0.5]);
        assert_eq!(predict(g, &params).unwrap(), predict(g, &params).unwrap());
    }

    #[test]
    fn rejects_invalid_configs() {
        let ds = tiny_dataset();
        let mut config = tiny_config();
        config.kl_sign = 0;
        assert!(train(&ds, &config).is_err());
        let mut config = tiny_config();
        config.batch_size = 0;
        assert!(train(&ds, &config).is_err());
        let mut config = tiny_config();
        config.prior_e = 1.0;
        assert!(train(&ds, &config).is_err());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let ds = tiny_dataset();
        let config = tiny_config();
        let params = init_params(ds.feature_dim + 1, &config).unwrap();
        let g = &ds.graphs[0];
        assert!(predict(g, &params).is_err());
    }

    #[test]
    fn no_debias_final_q_is_all_ones() {
        let ds = tiny_dataset();
        let config = TrainConfig {
            no_debias: true,
            epochs: 2,
            ..tiny_config()
        };
        let (_, report) = train(&ds, &config).unwrap();
        assert!(report.final_q.iter().all(|&q| q == 1.0));
        for stats in &report.history {
            assert_eq!(stats.l_kl, 0.0);
        }
    }

    #[test]
    fn training_on_single_node_graphs_does_not_panic() {
        // Degenerate pair samples must flow through the loss unharmed.
        let graphs = (0..6)
            .map(|i| {
                PropagationGraph::new(
                    alloc::format!("s{i}"),
                    Tensor2D::from_vec(1, 3, alloc::vec![0.1 * i as f64, -0.2, 0.5]).unwrap(),
                    alloc::vec![],
                    i % 2,
                    None,
                    None,
                )
                .unwrap()
            })
            .collect();
        let ds = Dataset::new(graphs).unwrap();
        let config = TrainConfig {
            epochs: 2,
            batch_size: 3,
            hidden: 4,
            estimator_hidden: 2,
            val_fraction: 0.0,
            ..TrainConfig::default()
        };
        let (_, report) = train(&ds, &config).unwrap();
        assert_eq!(report.history.len(), 2);
    }
}
