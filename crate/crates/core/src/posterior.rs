//! Closed-form posterior over the per-sample environment variable and the
//! loss terms that consume it.
//!
//! For sample `i` with branch log-likelihoods `ll_y`, `ll_A` and prior
//! `p = p(e=1)`, the posterior is
//!
//! ```text
//! q_i = exp(s1) / (exp(s1) + exp(s0)),
//!   s1 = ln p + ll_A(e=1) + ll_y(e=1),
//!   s0 = ln(1-p) + ll_A(e=0) + ll_y(e=0)
//! ```
//!
//! evaluated in log-space. The content prior p(X) appears in both numerator
//! and denominator and cancels, so it is never evaluated. The result is a
//! plain number (gradient-detached): the E-step fixes `q`, the M-step
//! optimizes parameters with `q` held constant.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fmath;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor2D;

/// Clamp applied to posterior values before any logarithm.
pub const Q_CLAMP: f64 = 1e-12;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Log-density of the standard normal at `x`.
pub fn log_std_normal(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// Which sample population a likelihood is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvBranch {
    /// e = 1: environment-independent; the learned models apply.
    Independent,
    /// e = 0: environment-biased; a fixed non-informative reference applies.
    Biased,
}

/// Instantiation of the e=0 reference distribution.
///
/// `Uniform` treats labels as uniform over classes and each sampled pair as
/// Bernoulli(1/2), which is a proper non-informative distribution.
/// `GaussianLogit` scores the e=1 raw outputs under a standard normal
/// density instead; both are constants with respect to the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum E0Mode {
    #[default]
    Uniform,
    GaussianLogit,
}

/// Prior on the environment variable plus the KL weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    /// p(e=1), strictly inside (0, 1).
    pub p_e: f64,
    /// Weight of the KL term in the total loss.
    pub lambda_kl: f64,
}

impl PriorConfig {
    pub fn new(p_e: f64, lambda_kl: f64) -> Result<Self> {
        let cfg = Self { p_e, lambda_kl };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_e > 0.0 && self.p_e < 1.0) {
            return Err(CoreError::InvalidConfig(alloc::format!(
                "prior p_e {} outside open interval (0, 1)",
                self.p_e
            )));
        }
        if !(self.lambda_kl >= 0.0 && self.lambda_kl.is_finite()) {
            return Err(CoreError::InvalidConfig(alloc::format!(
                "lambda_kl {} must be finite and non-negative",
                self.lambda_kl
            )));
        }
        Ok(())
    }
}

/// Per-sample posterior probabilities `q_i = p(e_i = 1 | A_i, X_i, y_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvPosterior {
    q: Vec<f64>,
}

impl EnvPosterior {
    /// A posterior fixed at 1 for every sample (the no-debias baseline).
    pub fn all_ones(len: usize) -> Self {
        Self {
            q: alloc::vec![1.0; len],
        }
    }

    /// Wraps already-inferred posterior values (per-epoch E-step lookups).
    pub fn from_vec_unchecked(q: Vec<f64>) -> Self {
        Self { q }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.q
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.q
    }
}

fn check_finite_slice(name: &'static str, xs: &[f64]) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CoreError::NonFinite { op: name })
    }
}

/// E-step: closed-form posterior from the four branch log-likelihoods.
pub fn infer_posterior(
    ll_y1: &[f64],
    ll_a1: &[f64],
    ll_y0: &[f64],
    ll_a0: &[f64],
    prior: &PriorConfig,
) -> Result<EnvPosterior> {
    prior.validate()?;
    let n = ll_y1.len();
    if ll_a1.len() != n || ll_y0.len() != n || ll_a0.len() != n {
        return Err(CoreError::InvalidConfig(
            "posterior inputs must have equal lengths".into(),
        ));
    }
    check_finite_slice("infer_posterior ll_y1", ll_y1)?;
    check_finite_slice("infer_posterior ll_a1", ll_a1)?;
    check_finite_slice("infer_posterior ll_y0", ll_y0)?;
    check_finite_slice("infer_posterior ll_a0", ll_a0)?;
    let ln_p = fmath::ln(prior.p_e);
    let ln_1mp = fmath::ln(1.0 - prior.p_e);
    let mut q = Vec::with_capacity(n);
    for i in 0..n {
        let s1 = ln_p + ll_a1[i] + ll_y1[i];
        let s0 = ln_1mp + ll_a0[i] + ll_y0[i];
        let m = s1.max(s0);
        let e1 = fmath::exp(s1 - m);
        let e0 = fmath::exp(s0 - m);
        q.push(e1 / (e1 + e0));
    }
    Ok(EnvPosterior { q })
}

fn check_loss_lengths(q: &EnvPosterior, ll1: &[f64], ll0: &[f64]) -> Result<usize> {
    let n = q.len();
    if n == 0 {
        return Err(CoreError::InvalidConfig("loss over an empty batch".into()));
    }
    if ll1.len() != n || ll0.len() != n {
        return Err(CoreError::InvalidConfig(
            "loss inputs must have equal lengths".into(),
        ));
    }
    Ok(n)
}

/// Posterior-weighted classification loss:
/// `-(1/N) sum_i [ q_i ll_y1_i + (1-q_i) ll_y0_i ]`.
pub fn classification_loss(q: &EnvPosterior, ll_y1: &[f64], ll_y0: &[f64]) -> Result<f64> {
    let n = check_loss_lengths(q, ll_y1, ll_y0)?;
    let mut acc = 0.0;
    for i in 0..n {
        acc += q.q[i] * ll_y1[i] + (1.0 - q.q[i]) * ll_y0[i];
    }
    Ok(-acc / n as f64)
}

/// Posterior-weighted structure regularization loss; same shape as
/// [`classification_loss`] over the structure log-likelihoods.
pub fn structure_loss(q: &EnvPosterior, ll_a1: &[f64], ll_a0: &[f64]) -> Result<f64> {
    classification_loss(q, ll_a1, ll_a0)
}

/// Mean Bernoulli KL divergence from the posterior to the prior,
/// `(1/N) sum_i D_KL(q_i || p_e) >= 0`.
///
/// `q` is treated as a constant, so this term carries no gradient; it is
/// reported and added to the total loss value.
pub fn kl_loss(q: &EnvPosterior, prior: &PriorConfig) -> Result<f64> {
    prior.validate()?;
    if q.is_empty() {
        return Err(CoreError::InvalidConfig("KL over an empty batch".into()));
    }
    let p = prior.p_e;
    let mut acc = 0.0;
    for &raw in &q.q {
        let qi = raw.clamp(Q_CLAMP, 1.0 - Q_CLAMP);
        acc += qi * fmath::ln(qi / p) + (1.0 - qi) * fmath::ln((1.0 - qi) / (1.0 - p));
    }
    Ok(acc / q.len() as f64)
}

/// Total objective `L_cl + L_reg + lambda_kl * L_KL`.
pub fn total_loss(l_cl: f64, l_reg: f64, l_kl: f64, prior: &PriorConfig) -> f64 {
    l_cl + l_reg + prior.lambda_kl * l_kl
}

/// Tape version of [`classification_loss`] / [`structure_loss`]: combines the
/// differentiable e=1 log-likelihood nodes with the constant e=0 values.
/// Gradients flow only through the `q`-weighted e=1 terms.
pub fn weighted_loss_on_tape(
    tape: &mut Tape,
    q: &EnvPosterior,
    ll1_nodes: &[NodeId],
    ll0_consts: &[f64],
) -> Result<NodeId> {
    let n = q.len();
    if ll1_nodes.len() != n || ll0_consts.len() != n {
        return Err(CoreError::InvalidConfig(
            "loss inputs must have equal lengths".into(),
        ));
    }
    if n == 0 {
        return Err(CoreError::InvalidConfig("loss over an empty batch".into()));
    }
    let mut acc: Option<NodeId> = None;
    let mut const_part = 0.0;
    for i in 0..n {
        let weighted = tape.scale(ll1_nodes[i], q.q[i])?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, weighted)?,
            None => weighted,
        });
        const_part += (1.0 - q.q[i]) * ll0_consts[i];
    }
    let sum = acc.expect("n >= 1");
    let with_const = {
        let c = tape.constant(Tensor2D::scalar(const_part));
        tape.add(sum, c)?
    };
    tape.scale(with_const, -1.0 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn prior(p: f64) -> PriorConfig {
        PriorConfig::new(p, 1.0).unwrap()
    }

    #[test]
    fn equal_likelihoods_return_the_prior() {
        let q = infer_posterior(&[-1.3], &[-4.2], &[-1.3], &[-4.2], &prior(0.7)).unwrap();
        assert_abs_diff_eq!(q.as_slice()[0], 0.7, epsilon = 1e-15);
    }

    #[test]
    fn worked_example_matches_direct_arithmetic() {
        // p=0.7, ll_y1=ln 0.9, ll_A1=ln 0.5, ll_y0=ln 0.5, ll_A0=ln 0.5
        // -> 0.315 / (0.315 + 0.075)
        let q = infer_posterior(
            &[0.9f64.ln()],
            &[0.5f64.ln()],
            &[0.5f64.ln()],
            &[0.5f64.ln()],
            &prior(0.7),
        )
        .unwrap();
        assert_abs_diff_eq!(q.as_slice()[0], 0.315 / (0.315 + 0.075), epsilon = 1e-12);
        assert_abs_diff_eq!(q.as_slice()[0], 0.8076923076923077, epsilon = 1e-12);
    }

    #[test]
    fn extreme_loglik_underflows_gracefully() {
        let q = infer_posterior(&[-0.5], &[-1.0e6], &[-0.7], &[-1.0], &prior(0.7)).unwrap();
        assert!(q.as_slice()[0] >= 0.0 && q.as_slice()[0] < 1e-100);
        let q = infer_posterior(&[-0.5], &[-1.0], &[-0.7], &[-1.0e6], &prior(0.7)).unwrap();
        assert!(q.as_slice()[0] > 1.0 - 1e-12 && q.as_slice()[0] <= 1.0);
    }

    #[test]
    fn rejects_non_finite_and_bad_prior() {
        assert!(infer_posterior(&[f64::NAN], &[0.0], &[0.0], &[0.0], &prior(0.5)).is_err());
        assert!(PriorConfig::new(0.0, 1.0).is_err());
        assert!(PriorConfig::new(1.0, 1.0).is_err());
        assert!(PriorConfig::new(0.5, -1.0).is_err());
    }

    #[test]
    fn classification_loss_reduces_to_nll_at_q_one() {
        let q = EnvPosterior::all_ones(3);
        let ll1 = [-0.1, -0.9, -0.3];
        let ll0 = [-0.6931, -0.6931, -0.6931];
        let want = -(ll1.iter().sum::<f64>()) / 3.0;
        assert_eq!(classification_loss(&q, &ll1, &ll0).unwrap(), want);
    }

    #[test]
    fn classification_loss_at_q_zero_is_the_constant_branch() {
        let q = EnvPosterior { q: alloc::vec![0.0; 2] };
        let ll0 = [0.5f64.ln(), 0.5f64.ln()];
        let loss = classification_loss(&q, &[-9.0, -2.0], &ll0).unwrap();
        assert_abs_diff_eq!(loss, 2.0f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn loss_matches_direct_summation_oracle() {
        let q = EnvPosterior {
            q: alloc::vec![0.3, 0.8, 0.55, 1.0],
        };
        let ll1 = [-0.4, -1.2, -0.05, -2.2];
        let ll0 = [-0.7, -0.7, -0.7, -0.7];
        let mut oracle = 0.0;
        for i in 0..4 {
            oracle += q.q[i] * ll1[i] + (1.0 - q.q[i]) * ll0[i];
        }
        oracle = -oracle / 4.0;
        assert_abs_diff_eq!(
            classification_loss(&q, &ll1, &ll0).unwrap(),
            oracle,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            structure_loss(&q, &ll1, &ll0).unwrap(),
            oracle,
            epsilon = 1e-15
        );
    }

    #[test]
    fn kl_is_zero_at_the_prior_and_ln2_at_certainty() {
        let p = prior(0.7);
        let q = EnvPosterior { q: alloc::vec![0.7; 5] };
        assert_abs_diff_eq!(kl_loss(&q, &p).unwrap(), 0.0, epsilon = 1e-12);
        let q1 = EnvPosterior { q: alloc::vec![1.0] };
        assert_abs_diff_eq!(
            kl_loss(&q1, &prior(0.5)).unwrap(),
            2.0f64.ln(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn kl_scalar_example() {
        let q = EnvPosterior { q: alloc::vec![0.9] };
        let want = 0.9 * (0.9f64 / 0.7).ln() + 0.1 * (0.1f64 / 0.3).ln();
        let got = kl_loss(&q, &prior(0.7)).unwrap();
        assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        assert_abs_diff_eq!(got, 0.11632, epsilon = 5e-6);
    }

    #[test]
    fn kl_is_non_negative() {
        let p = prior(0.6);
        for &v in &[0.0, 0.01, 0.3, 0.6, 0.61, 0.99, 1.0] {
            let q = EnvPosterior { q: alloc::vec![v] };
            assert!(kl_loss(&q, &p).unwrap() >= 0.0, "q={v}");
        }
    }

    #[test]
    fn total_loss_is_the_weighted_sum() {
        let p = PriorConfig::new(0.7, 0.0).unwrap();
        assert_eq!(total_loss(1.5, 2.5, 100.0, &p), 4.0);
        let p = PriorConfig::new(0.7, 2.0).unwrap();
        assert_eq!(total_loss(0.0, 0.0, 0.0, &p), 0.0);
        assert_eq!(total_loss(1.0, 2.0, 3.0, &p), 9.0);
    }

    #[test]
    fn tape_loss_value_matches_pure_function() {
        let q = EnvPosterior {
            q: alloc::vec![0.25, 0.9],
        };
        let ll1 = [-1.5, -0.25];
        let ll0 = [-0.6, -0.6];
        let mut tape = Tape::new();
        let n1 = tape.leaf(Tensor2D::scalar(ll1[0]));
        let n2 = tape.leaf(Tensor2D::scalar(ll1[1]));
        let node = weighted_loss_on_tape(&mut tape, &q, &[n1, n2], &ll0).unwrap();
        let want = classification_loss(&q, &ll1, &ll0).unwrap();
        assert_abs_diff_eq!(tape.scalar_value(node).unwrap(), want, epsilon = 1e-12);
    }

    #[test]
    fn posterior_is_monotone_in_each_argument() {
        let p = prior(0.6);
        let base = infer_posterior(&[-1.0], &[-2.0], &[-1.5], &[-2.5], &p).unwrap().as_slice()[0];
        let up_y1 = infer_posterior(&[-0.5], &[-2.0], &[-1.5], &[-2.5], &p).unwrap().as_slice()[0];
        let up_a1 = infer_posterior(&[-1.0], &[-1.0], &[-1.5], &[-2.5], &p).unwrap().as_slice()[0];
        let up_y0 = infer_posterior(&[-1.0], &[-2.0], &[-0.5], &[-2.5], &p).unwrap().as_slice()[0];
        let up_a0 = infer_posterior(&[-1.0], &[-2.0], &[-1.5], &[-1.5], &p).unwrap().as_slice()[0];
        assert!(up_y1 > base && up_a1 > base);
        assert!(up_y0 < base && up_a0 < base);
        let hi_p = infer_posterior(&[-1.0], &[-2.0], &[-1.5], &[-2.5], &prior(0.8)).unwrap().as_slice()[0];
        assert!(hi_p > base);
    }
}
