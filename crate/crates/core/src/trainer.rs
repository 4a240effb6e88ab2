//! Deterministic mini-batch training.
//!
//! Per epoch the training split is shuffled with a permutation derived from
//! `(seed, epoch)`; per batch the crops are drawn from a stream derived from
//! `(seed, epoch, batch)`. Given the same configuration and scalar type a run
//! is bit-reproducible.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::datagen::{DatasetSplit, Image, Sample, SplitKind};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ModelParams, ParamId};
use crate::objective::{self, LossBreakdown, LossWeights};
use crate::optim::{Adam, AdamConfig};
use crate::real::Real;
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TrainMode {
    /// Both branches, gradient reversal, KL regularizer.
    Debiased,
    /// Original branch only; λ and β are forced to 0.
    Baseline,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Debiased => "debiased",
            Self::Baseline => "baseline",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "debiased" => Some(Self::Debiased),
            "baseline" => Some(Self::Baseline),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lambda: f64,
    pub beta: f64,
    pub alpha: f64,
    pub kl_stop_grad_s1: bool,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Small-dataset defaults: 30 epochs, batch 64, lr 1e-4.
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lambda: 0.1,
            beta: 1.0,
            alpha: 1.0,
            kl_stop_grad_s1: false,
            seed: 0,
            mode: TrainMode::Debiased,
        }
    }

    /// Published full-scale settings: 150 epochs, batch 280, lr 1e-5.
    pub fn paper() -> Self {
        Self {
            epochs: 150,
            batch_size: 280,
            learning_rate: 1e-5,
            ..Self::desk()
        }
    }

    pub fn profile(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "paper" => Some(Self::paper()),
            _ => None,
        }
    }

    /// The configuration actually trained: baseline mode zeroes λ and β.
    pub fn normalized(&self) -> Self {
        let mut c = self.clone();
        if c.mode == TrainMode::Baseline {
            c.lambda = 0.0;
            c.beta = 0.0;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig(String::from("batch size must be positive")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "Adam moments ({}, {}) must lie in [0, 1) and eps {} be positive",
                self.adam_beta1, self.adam_beta2, self.adam_eps
            )));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::InvalidConfig(format!("alpha {} must be >= 0", self.alpha)));
        }
        self.loss_weights().validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        let c = self.normalized();
        LossWeights {
            lambda: c.lambda,
            beta: c.beta,
            kl_stop_grad_s1: c.kl_stop_grad_s1,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub l1: f64,
    pub l_adv: f64,
    pub l2: f64,
    pub total: f64,
    pub acc_original: f64,
    /// `None` when the adversarial branch did not run.
    pub acc_adversarial: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

/// Result of one optimizer step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: LossBreakdown,
    pub correct_original: usize,
    pub correct_adversarial: Option<usize>,
    /// L2 norm of each parameter's gradient (0 when it received none).
    pub grad_norms: Vec<(ParamId, f64)>,
}

fn count_correct<T: Real>(logits: &crate::Tensor<T>, targets: &[usize]) -> usize {
    targets
        .iter()
        .enumerate()
        .filter(|&(i, &t)| model::argmax(logits.row(i)) == t)
        .count()
}

/// Forward, loss, reverse pass and one Adam update on a batch.
///
/// In baseline mode only the original branch is built.
pub fn train_step<T: Real>(
    params: &mut ModelParams<T>,
    adam: &mut Adam<T>,
    batch: &[&Sample],
    crop_rng: &mut StreamRng,
    config: &TrainConfig,
) -> Result<StepOutput> {
    let images: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
    let tokens: Vec<&[usize]> = batch.iter().map(|s| s.question_tokens.as_slice()).collect();
    let targets: Vec<usize> = batch.iter().map(|s| s.answer_id).collect();

    let (graph, bound, loss, correct_original, correct_adversarial) = match config.mode {
        TrainMode::Debiased => {
            let mut fwd = model::forward_train(params, &images, &tokens, crop_rng)?;
            let (vars, loss) =
                objective::attach_total_loss(&mut fwd.graph, fwd.s1, fwd.s2, &targets, &config.loss_weights())?;
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch: 0, batch: 0 });
            }
            fwd.graph.backward(vars.total)?;
            let c1 = count_correct(fwd.graph.value(fwd.s1), &targets);
            let c2 = count_correct(fwd.graph.value(fwd.s2), &targets);
            (fwd.graph, fwd.params, loss, c1, Some(c2))
        }
        TrainMode::Baseline => {
            let (mut g, bound, s1) = model::forward_original(params, &images, &tokens, &model::INFER_PARAMS)?;
            let (vars, loss) = objective::attach_original_loss(&mut g, s1, &targets)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch: 0, batch: 0 });
            }
            g.backward(vars.total)?;
            let c1 = count_correct(g.value(s1), &targets);
            (g, bound, loss, c1, None)
        }
    };

    let grad_of = |id: ParamId| bound.get(id).and_then(|v| graph.grad(v));
    let grad_norms = ParamId::ALL
        .iter()
        .map(|&id| {
            let n = grad_of(id)
                .map(|g| g.iter().map(|&x| Real::to_f64(x) * Real::to_f64(x)).sum::<f64>())
                .unwrap_or(0.0);
            (id, num_traits::Float::sqrt(n))
        })
        .collect();
    adam.step_params(params, grad_of);
    Ok(StepOutput {
        loss,
        correct_original,
        correct_adversarial,
        grad_norms,
    })
}

/// Trains from a seed-derived initialization.
pub fn train<T: Real>(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    dataset: &DatasetSplit,
) -> Result<(ModelParams<T>, TrainLog)> {
    train_with(model_config, train_config, dataset, |_| {})
}

/// [`train`] with a callback after every completed epoch.
pub fn train_with<T: Real>(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    dataset: &DatasetSplit,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParams<T>, TrainLog)> {
    let config = train_config.normalized();
    config.validate()?;
    if dataset.kind != SplitKind::TrainBiased {
        return Err(Error::WrongSplit {
            expected: SplitKind::TrainBiased.name(),
            found: dataset.kind.name(),
        });
    }
    if dataset.is_empty() {
        return Err(Error::InvalidConfig(String::from("training split is empty")));
    }
    let mut mc = model_config.clone();
    mc.grl_alpha = config.alpha;
    let mut params = ModelParams::<T>::init(&mc, config.seed)?;
    let mut adam = Adam::for_params(config.adam(), &params);
    let mut log = TrainLog::default();

    let n = dataset.len();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(config.seed, rng::DOMAIN_SHUFFLE, &[epoch as u64]));
        let (mut l1, mut l_adv, mut l2, mut total) = (0.0, 0.0, 0.0, 0.0);
        let (mut c1, mut c2) = (0usize, 0usize);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &dataset.samples[i]).collect();
            let mut crop_rng = rng::stream(config.seed, rng::DOMAIN_CROP, &[epoch as u64, b as u64]);
            let out = train_step(&mut params, &mut adam, &batch, &mut crop_rng, &config).map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: b,
                },
                other => other,
            })?;
            let w = batch.len() as f64;
            l1 += out.loss.l1 * w;
            l_adv += out.loss.l_adv * w;
            l2 += out.loss.l2 * w;
            total += out.loss.total * w;
            c1 += out.correct_original;
            c2 += out.correct_adversarial.unwrap_or(0);
        }
        let nf = n as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            l1: l1 / nf,
            l_adv: l_adv / nf,
            l2: l2 / nf,
            total: total / nf,
            acc_original: c1 as f64 / nf,
            acc_adversarial: (config.mode == TrainMode::Debiased).then(|| c2 as f64 / nf),
        };
        on_epoch(&record);
        log.records.push(record);
    }
    Ok((params, log))
}
