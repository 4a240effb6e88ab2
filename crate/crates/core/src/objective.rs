//! Training losses: cross entropy on each branch, the KL divergence between
//! the branches' answer distributions, and their weighted sum
//! `total = CE(s1, y) + β·CE(s2, y) + λ·KL(s1 ‖ s2)`.
//!
//! All values are batch means in nats, computed in log space. The adversarial
//! logits `s2` sit behind the gradient reversal operator, so minimizing
//! `total` pushes the shared layers toward a worse adversarial branch and a
//! larger KL divergence, while `h2` itself is trained normally.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    /// KL weight λ.
    pub lambda: f64,
    /// Adversarial cross-entropy weight β.
    pub beta: f64,
    /// Treat `s1` as a constant inside the KL term.
    pub kl_stop_grad_s1: bool,
}

impl LossWeights {
    pub fn new(lambda: f64, beta: f64) -> Self {
        Self {
            lambda,
            beta,
            kl_stop_grad_s1: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.beta >= 0.0) || !self.lambda.is_finite() || !self.beta.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be finite and >= 0 (lambda={}, beta={})",
                self.lambda, self.beta
            )));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::new(0.1, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossBreakdown {
    /// Original-branch cross entropy.
    pub l1: f64,
    /// Adversarial-branch cross entropy.
    pub l_adv: f64,
    /// `KL(s1 ‖ s2)`.
    pub l2: f64,
    pub total: f64,
    pub lambda: f64,
    pub beta: f64,
}

fn row_input<T: Real>(g: &mut Graph<T>, logits: &[T]) -> Result<Var> {
    Ok(g.input(Tensor::from_vec(&[1, logits.len()], logits.to_vec())?))
}

/// `-log softmax(logits)[answer_id]`.
pub fn cross_entropy<T: Real>(logits: &[T], answer_id: usize) -> Result<T> {
    if answer_id >= logits.len() {
        return Err(Error::InvalidLabel {
            label: answer_id,
            classes: logits.len(),
        });
    }
    let mut g = Graph::new();
    let s = row_input(&mut g, logits)?;
    let l = g.cross_entropy(s, &[answer_id])?;
    Ok(g.value(l).data()[0])
}

/// Mean cross entropy over the rows of `[B, K]` logits.
pub fn cross_entropy_batch<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<T> {
    let mut g = Graph::new();
    let s = g.input(logits.clone());
    let l = g.cross_entropy(s, targets)?;
    Ok(g.value(l).data()[0])
}

/// `KL(softmax(s1) ‖ softmax(s2))`.
pub fn kl_divergence<T: Real>(s1: &[T], s2: &[T]) -> Result<T> {
    if s1.len() != s2.len() {
        return Err(Error::ShapeMismatch(format!(
            "kl_divergence: {} vs {} logits",
            s1.len(),
            s2.len()
        )));
    }
    let mut g = Graph::new();
    let a = row_input(&mut g, s1)?;
    let b = row_input(&mut g, s2)?;
    let l = g.kl_div(a, b, false)?;
    Ok(g.value(l).data()[0])
}

/// Loss components for a single sample.
pub fn total_loss<T: Real>(s1: &[T], s2: &[T], answer_id: usize, lambda: f64, beta: f64) -> Result<LossBreakdown> {
    let w = LossWeights::new(lambda, beta);
    w.validate()?;
    let mut g = Graph::new();
    let a = row_input(&mut g, s1)?;
    let b = row_input(&mut g, s2)?;
    let (_, breakdown) = attach_total_loss(&mut g, a, b, &[answer_id], &w)?;
    Ok(breakdown)
}

/// Tape handles for the loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub l1: Var,
    pub l_adv: Option<Var>,
    pub l2: Option<Var>,
}

/// Records the composite objective on `g` for batched logits `s1`, `s2`.
pub fn attach_total_loss<T: Real>(
    g: &mut Graph<T>,
    s1: Var,
    s2: Var,
    targets: &[usize],
    weights: &LossWeights,
) -> Result<(LossVars, LossBreakdown)> {
    weights.validate()?;
    let l1 = g.cross_entropy(s1, targets)?;
    let l_adv = g.cross_entropy(s2, targets)?;
    let l2 = g.kl_div(s1, s2, weights.kl_stop_grad_s1)?;
    let adv = g.scale(l_adv, T::from_f64(weights.beta));
    let kl = g.scale(l2, T::from_f64(weights.lambda));
    let partial = g.add(l1, adv)?;
    let total = g.add(partial, kl)?;
    let scalar = |g: &Graph<T>, v: Var| g.value(v).data()[0].to_f64();
    let breakdown = LossBreakdown {
        l1: scalar(g, l1),
        l_adv: scalar(g, l_adv),
        l2: scalar(g, l2),
        total: scalar(g, total),
        lambda: weights.lambda,
        beta: weights.beta,
    };
    Ok((
        LossVars {
            total,
            l1,
            l_adv: Some(l_adv),
            l2: Some(l2),
        },
        breakdown,
    ))
}

/// Original-branch objective only: `total = CE(s1, y)`.
pub fn attach_original_loss<T: Real>(
    g: &mut Graph<T>,
    s1: Var,
    targets: &[usize],
) -> Result<(LossVars, LossBreakdown)> {
    let l1 = g.cross_entropy(s1, targets)?;
    let v = g.value(l1).data()[0].to_f64();
    Ok((
        LossVars {
            total: l1,
            l1,
            l_adv: None,
            l2: None,
        },
        LossBreakdown {
            l1: v,
            total: v,
            ..LossBreakdown::default()
        },
    ))
}

/// Row-wise softmax probabilities, for reporting.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    crate::autodiff::log_softmax(logits, logits.len())
        .into_iter()
        .map(T::exp)
        .collect()
}
