//! Mini-batch SGD with momentum and l2 weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimizer hyperparameters. Defaults: lr 1e-2, momentum 0.9, decay 5e-4.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.learning_rate.is_nan() {
            return Err(Error::InvalidConfig(
                "learning rate must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 || self.weight_decay.is_nan() {
            return Err(Error::InvalidConfig(
                "weight decay must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn plain_sgd(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }
}

/// Velocity buffers for the two halves of a split model. The client buffer is
/// shared by all replicas: the averaged gradient drives one velocity and the
/// identical update is applied to every replica, which is what keeps them
/// synchronized.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    server_velocity: Vec<f64>,
    client_velocity: Vec<f64>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, client_params: usize, server_params: usize) -> Self {
        Self {
            config,
            server_velocity: vec![0.0; server_params],
            client_velocity: vec![0.0; client_params],
        }
    }

    /// One SGD step: g <- grad + decay * param; v <- momentum * v + g;
    /// param <- param - lr * v.
    fn apply(config: &OptimizerConfig, params: &mut [f64], grads: &[f64], velocity: &mut [f64]) {
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
            let g = g + config.weight_decay * *p;
            *v = config.momentum * *v + g;
            *p -= config.learning_rate * *v;
        }
    }

    pub fn step_server(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() || grads.len() != self.server_velocity.len() {
            return Err(Error::ShapeMismatch(
                "server gradient shape disagrees with parameters".into(),
            ));
        }
        Self::apply(&self.config, params, grads, &mut self.server_velocity);
        Ok(())
    }

    /// Advance the shared client velocity and return the updated parameter
    /// vector computed from `params`; the caller copies it into every replica.
    pub fn step_client(&mut self, params: &[f64], grads: &[f64]) -> Result<Vec<f64>> {
        if params.len() != grads.len() || grads.len() != self.client_velocity.len() {
            return Err(Error::ShapeMismatch(
                "client gradient shape disagrees with parameters".into(),
            ));
        }
        let mut updated = params.to_vec();
        Self::apply(&self.config, &mut updated, grads, &mut self.client_velocity);
        Ok(updated)
    }
}
