use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricMode {
    /// Summed softmax probability of the positive set minus that of the
    /// negative set.
    ProbDiff,
    /// Mean raw logit of the positive set minus mean raw logit of the
    /// negative set.
    LogitDiff,
}

/// Task metric read off the final position of a sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub mode: MetricMode,
    pub positive: Vec<u32>,
    pub negative: Vec<u32>,
}

fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
    let exps: Vec<S> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl MetricSpec {
    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.positive.iter().chain(&self.negative).find(|&&t| t as usize >= vocab_size) {
            Some(&token) => Err(Error::TokenOutOfRange { token, vocab_size }),
            None => Ok(()),
        }
    }

    /// Sets must be non-empty and disjoint for a task example.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        self.check_vocab(vocab_size)?;
        if self.positive.is_empty() || self.negative.is_empty() {
            return Err(Error::Task("metric token sets must be non-empty".into()));
        }
        if self.positive.iter().any(|t| self.negative.contains(t)) {
            return Err(Error::Task("positive and negative token sets overlap".into()));
        }
        Ok(())
    }

    pub fn value<S: Scalar>(&self, logits: &[S]) -> S {
        match self.mode {
            MetricMode::ProbDiff => {
                let p = softmax(logits);
                let pos: S = self.positive.iter().map(|&t| p[t as usize]).sum();
                let neg: S = self.negative.iter().map(|&t| p[t as usize]).sum();
                pos - neg
            }
            MetricMode::LogitDiff => mean_logit(logits, &self.positive) - mean_logit(logits, &self.negative),
        }
    }

    /// Derivative of [`MetricSpec::value`] with respect to each logit.
    pub fn gradient<S: Scalar>(&self, logits: &[S]) -> Vec<S> {
        let mut w = vec![S::zero(); logits.len()];
        match self.mode {
            MetricMode::ProbDiff => {
                for &t in &self.positive {
                    w[t as usize] += S::one();
                }
                for &t in &self.negative {
                    w[t as usize] -= S::one();
                }
                // dm/dl_j = p_j (w_j - m)
                let p = softmax(logits);
                let m: S = p.iter().zip(&w).map(|(&a, &b)| a * b).sum();
                p.iter().zip(&w).map(|(&pj, &wj)| pj * (wj - m)).collect()
            }
            MetricMode::LogitDiff => {
                if !self.positive.is_empty() {
                    let s = S::one() / S::lit(self.positive.len() as f64);
                    for &t in &self.positive {
                        w[t as usize] += s;
                    }
                }
                if !self.negative.is_empty() {
                    let s = S::one() / S::lit(self.negative.len() as f64);
                    for &t in &self.negative {
                        w[t as usize] -= s;
                    }
                }
                w
            }
        }
    }

    /// Whether the positive set receives more probability than the negative
    /// set, the per-example correctness criterion for accuracy.
    pub fn is_correct<S: Scalar>(&self, logits: &[S]) -> bool {
        let p = softmax(logits);
        let pos: S = self.positive.iter().map(|&t| p[t as usize]).sum();
        let neg: S = self.negative.iter().map(|&t| p[t as usize]).sum();
        pos > neg
    }
}

fn mean_logit<S: Scalar>(logits: &[S], set: &[u32]) -> S {
    if set.is_empty() {
        return S::zero();
    }
    let total: S = set.iter().map(|&t| logits[t as usize]).sum();
    total / S::lit(set.len() as f64)
}
