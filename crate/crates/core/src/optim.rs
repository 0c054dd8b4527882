//! Small optimizers for parameter tensors.
//!
//! Optimizers own their moment state; parameter lists must keep a stable
//! order and shape across calls.

use serde::{Deserialize, Serialize};

use crate::tensor::{c, Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Linear decay target; `lr` is used throughout when absent.
    pub lr_final: Option<f64>,
    /// Steps over which to decay to `lr_final`.
    pub decay_steps: Option<u64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 1e-2,
            momentum: 0.0,
            lr_final: None,
            decay_steps: None,
        }
    }
}

#[derive(Debug)]
pub struct Sgd<T> {
    cfg: SgdConfig,
    velocity: Vec<Tensor<T>>,
    steps: u64,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(cfg: SgdConfig) -> Self {
        Sgd {
            cfg,
            velocity: Vec::new(),
            steps: 0,
        }
    }

    pub fn current_lr(&self) -> f64 {
        match (self.cfg.lr_final, self.cfg.decay_steps) {
            (Some(end), Some(total)) if total > 0 => {
                let frac = (self.steps as f64 / total as f64).min(1.0);
                self.cfg.lr + (end - self.cfg.lr) * frac
            }
            _ => self.cfg.lr,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        check_pairs("sgd", params, grads)?;
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        let lr = c::<T>(self.current_lr());
        let mu = c::<T>(self.cfg.momentum);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mu * *vv + gv;
                *pv = *pv - lr * *vv;
            }
        }
        self.steps += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    steps: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        check_pairs("adam", params, grads)?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        self.steps += 1;
        let b1 = c::<T>(self.cfg.beta1);
        let b2 = c::<T>(self.cfg.beta2);
        let corr1 = T::one() - c::<T>(self.cfg.beta1.powi(self.steps as i32));
        let corr2 = T::one() - c::<T>(self.cfg.beta2.powi(self.steps as i32));
        let lr = c::<T>(self.cfg.lr);
        let eps = c::<T>(self.cfg.eps);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mhat = *mv / corr1;
                let vhat = *vv / corr2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

fn check_pairs<T: Scalar>(op: &str, params: &[&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::ShapeMismatch {
            op: op.into(),
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: op.into(),
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    Ok(())
}
