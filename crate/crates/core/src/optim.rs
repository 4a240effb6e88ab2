//! Adam with bias-corrected moment estimates.

use alloc::vec;
use alloc::vec::Vec;

use crate::model::{ModelParams, ParamId};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    /// State for tensors of the given sizes.
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn for_params(config: AdamConfig, params: &ModelParams<T>) -> Self {
        let sizes: Vec<usize> = params.iter().map(|(_, t)| t.len()).collect();
        Self::new(config, &sizes)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every tensor. A missing gradient counts as zero.
    pub fn step(&mut self, tensors: &mut [&mut [T]], grads: &[Option<&[T]>]) {
        assert_eq!(tensors.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let t = self.step as i32;
        let corr1 = T::one() - b1.powi(t);
        let corr2 = T::one() - b2.powi(t);
        let lr = T::from_f64(c.learning_rate);
        let eps = T::from_f64(c.eps);
        for (i, theta) in tensors.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            match grads[i] {
                Some(g) => {
                    for j in 0..theta.len() {
                        m[j] = b1 * m[j] + one_b1 * g[j];
                        v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                    }
                }
                None => {
                    for j in 0..theta.len() {
                        m[j] = b1 * m[j];
                        v[j] = b2 * v[j];
                    }
                }
            }
            for j in 0..theta.len() {
                let m_hat = m[j] / corr1;
                let v_hat = v[j] / corr2;
                theta[j] = theta[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    /// Updates model parameters with gradients looked up by id.
    pub fn step_params<'a>(&mut self, params: &mut ModelParams<T>, grad: impl Fn(ParamId) -> Option<&'a [T]>)
    where
        T: 'a,
    {
        let grads: Vec<Option<&[T]>> = ParamId::ALL.iter().map(|&id| grad(id)).collect();
        let mut tensors: Vec<&mut [T]> = params.iter_mut().map(|(_, t)| t.data_mut()).collect();
        self.step(&mut tensors, &grads);
    }
}
