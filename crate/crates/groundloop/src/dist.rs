//! Per-step token distributions and the divergences defined over them.
//!
//! KL here is the single source of truth: the training regularizer, the
//! KL-drift metric, and the Jensen-Shannon divergence all call
//! [`kl_divergence`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, l2_norm, softmax};
use crate::scalar::{cast, Scalar};

/// Reference-distribution floor applied before taking logs.
pub const KL_EPSILON: f64 = 1e-10;

/// Probability vector over the vocabulary at one decoding step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution<S> {
    probs: Vec<S>,
    step: usize,
}

impl<S: Scalar> TokenDistribution<S> {
    /// Wraps an explicit probability vector. Entries must be nonnegative and
    /// sum to one within 1e-9.
    pub fn from_probs(probs: Vec<S>, step: usize) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptyInput("probability vector"));
        }
        if probs.iter().any(|&p| p < S::zero() || !p.is_finite()) {
            return Err(Error::InvalidArgument(
                "probabilities must be finite and nonnegative".into(),
            ));
        }
        let sum: S = probs.iter().cloned().sum();
        if (crate::scalar::to_f64(sum) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(TokenDistribution { probs, step })
    }

    pub fn from_logits(logits: &[S], step: usize) -> Self {
        TokenDistribution {
            probs: softmax(logits),
            step,
        }
    }

    pub fn probs(&self) -> &[S] {
        &self.probs
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// `KL(P || Q) = sum_i p_i ln(p_i / q_i)` in nats, with `0 ln(0/q) = 0` and
/// `q` floored at [`KL_EPSILON`]. Entries that are bitwise equal contribute
/// exactly zero, so `KL(P, P) == 0.0` and the pre-training identity
/// `P_gen == P_ret  =>  L_KL == 0` holds exactly.
pub fn kl_divergence<S: Scalar>(p: &TokenDistribution<S>, q: &TokenDistribution<S>) -> Result<S> {
    if p.len() != q.len() {
        return Err(Error::DimMismatch(format!(
            "kl_divergence: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let eps = cast::<S>(KL_EPSILON);
    let mut acc = S::zero();
    for (&pi, &qi) in p.probs.iter().zip(&q.probs) {
        if pi == S::zero() || pi == qi {
            continue;
        }
        acc += pi * (pi.ln() - qi.max(eps).ln());
    }
    Ok(acc)
}

/// Jensen-Shannon divergence in nats: `0.5 KL(P||M) + 0.5 KL(Q||M)` with
/// `M = (P + Q) / 2`. Symmetric and bounded by `ln 2`.
pub fn jsd<S: Scalar>(p: &TokenDistribution<S>, q: &TokenDistribution<S>) -> Result<S> {
    if p.len() != q.len() {
        return Err(Error::DimMismatch(format!(
            "jsd: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let half = cast::<S>(0.5);
    let m_probs: Vec<S> = p
        .probs
        .iter()
        .zip(&q.probs)
        .map(|(&a, &b)| half * (a + b))
        .collect();
    let m = TokenDistribution {
        probs: m_probs,
        step: p.step,
    };
    Ok(half * (kl_divergence(p, &m)? + kl_divergence(q, &m)?))
}

/// Shannon entropy in nats of a probability row; zero entries contribute
/// nothing.
pub fn entropy<S: Scalar>(row: &[S]) -> S {
    let mut acc = S::zero();
    for &p in row {
        if p > S::zero() {
            acc -= p * p.ln();
        }
    }
    acc
}

/// Cosine similarity between two distributions viewed as plain vectors.
pub fn cosine<S: Scalar>(p: &TokenDistribution<S>, q: &TokenDistribution<S>) -> Result<S> {
    if p.len() != q.len() {
        return Err(Error::DimMismatch(format!(
            "cosine: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let np = l2_norm(p.probs());
    let nq = l2_norm(q.probs());
    if np == S::zero() || nq == S::zero() {
        return Err(Error::InvalidArgument("zero-norm distribution".into()));
    }
    Ok(dot(p.probs(), q.probs()) / (np * nq))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(p: &[f64]) -> TokenDistribution<f64> {
        TokenDistribution::from_probs(p.to_vec(), 0).unwrap()
    }

    #[test]
    fn kl_of_identical_is_exactly_zero() {
        let p = d(&[0.2, 0.3, 0.5]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_onehot_vs_uniform_is_ln2() {
        let p = d(&[1.0, 0.0]);
        let q = d(&[0.5, 0.5]);
        assert!((kl_divergence(&p, &q).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn jsd_disjoint_onehots_is_ln2() {
        let p = d(&[1.0, 0.0]);
        let q = d(&[0.0, 1.0]);
        assert!((jsd(&p, &q).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn entropy_uniform_is_ln_n() {
        let row = [0.25f64; 4];
        assert!((entropy(&row) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[1.0f64, 0.0]), 0.0);
    }

    #[test]
    fn rejects_bad_probability_vectors() {
        assert!(TokenDistribution::from_probs(vec![0.5f64, 0.6], 0).is_err());
        assert!(TokenDistribution::from_probs(vec![-0.1f64, 1.1], 0).is_err());
        assert!(TokenDistribution::<f64>::from_probs(vec![], 0).is_err());
    }

    #[test]
    fn dim_mismatch_is_an_error() {
        let p = d(&[1.0]);
        let q = d(&[0.5, 0.5]);
        assert!(kl_divergence(&p, &q).is_err());
        assert!(jsd(&p, &q).is_err());
    }

    #[test]
    fn f32_instantiation() {
        let p = TokenDistribution::<f32>::from_logits(&[0.0, 1.0, 2.0], 3);
        let sum: f32 = p.probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert_eq!(p.step(), 3);
    }
}
