//! SGD with classical momentum and layer-wise adaptive rate scaling.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{FktError, Result};
use crate::model::Model;
use crate::nn::{ParamRef, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Sgd,
    Lars,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub kind: OptimKind,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Only consulted by LARS.
    #[serde(default = "default_trust")]
    pub trust_coefficient: f64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_trust() -> f64 {
    0.001
}

impl OptimizerSettings {
    /// Contrastive-pretraining default: LARS, lr 0.001.
    pub fn lars_default() -> Self {
        OptimizerSettings {
            kind: OptimKind::Lars,
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 1e-6,
            trust_coefficient: 0.001,
        }
    }

    /// Supervised default: SGD, lr 0.025.
    pub fn sgd_default() -> Self {
        OptimizerSettings {
            kind: OptimKind::Sgd,
            lr: 0.025,
            momentum: 0.9,
            weight_decay: 0.0,
            trust_coefficient: 0.001,
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(FktError::InvalidConfig(format!(
                "{field}.lr: must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(FktError::InvalidConfig(format!(
                "{field}.momentum: must be in [0,1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(FktError::InvalidConfig(format!(
                "{field}.weight_decay: must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.trust_coefficient <= 0.0 {
            return Err(FktError::InvalidConfig(format!(
                "{field}.trust_coefficient: must be positive, got {}",
                self.trust_coefficient
            )));
        }
        Ok(())
    }
}

fn check_grads_finite(name: &str, grads: &[f64]) -> Result<()> {
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(FktError::Divergence(format!(
            "non-finite gradient in {name}"
        )));
    }
    Ok(())
}

/// Classical momentum update: v <- momentum*v + (g + wd*w); w <- w - lr*v.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    check_grads_finite("sgd step", grads)?;
    for ((w, &g), v) in params.iter_mut().zip(grads.iter()).zip(velocity.iter_mut()) {
        *v = momentum * *v + (g + weight_decay * *w);
        *w -= lr * *v;
    }
    Ok(())
}

/// Layer-wise adaptive step for one parameter tensor.
///
/// Non-excluded tensors rescale the step by
/// `trust_coefficient * ||w|| / ||g + wd*w||` when both norms are positive
/// (1 otherwise); the momentum buffer accumulates the effective step
/// `lr * local_lr * (g + wd*w)`. Bias and normalization tensors
/// (`excluded = true`) skip both the adaptation and the weight decay.
#[allow(clippy::too_many_arguments)]
pub fn lars_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    trust_coefficient: f64,
    excluded: bool,
) -> Result<()> {
    check_grads_finite("lars step", grads)?;
    let (wd, local_lr) = if excluded {
        (0.0, 1.0)
    } else {
        let weight_norm = params.iter().map(|w| w * w).sum::<f64>().sqrt();
        let grad_norm = params
            .iter()
            .zip(grads.iter())
            .map(|(w, g)| {
                let u = g + weight_decay * w;
                u * u
            })
            .sum::<f64>()
            .sqrt();
        let local = if weight_norm > 0.0 && grad_norm > 0.0 {
            trust_coefficient * weight_norm / grad_norm
        } else {
            1.0
        };
        (weight_decay, local)
    };
    for ((w, &g), v) in params.iter_mut().zip(grads.iter()).zip(velocity.iter_mut()) {
        let update = g + wd * *w;
        *v = momentum * *v + lr * local_lr * update;
        *w -= *v;
    }
    Ok(())
}

/// Stateful wrapper holding per-tensor momentum buffers keyed by name.
#[derive(Debug)]
pub struct Optimizer {
    pub settings: OptimizerSettings,
    velocities: HashMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(settings: OptimizerSettings) -> Self {
        Optimizer {
            settings,
            velocities: HashMap::new(),
        }
    }

    /// Update every parameter whose name passes the filter.
    pub fn step_filtered(
        &mut self,
        model: &mut Model,
        mut filter: impl FnMut(&str) -> bool,
    ) -> Result<()> {
        let settings = self.settings;
        let velocities = &mut self.velocities;
        let mut failure: Option<FktError> = None;
        model.visit_params("", &mut |p: ParamRef<'_>| {
            if failure.is_some() || !filter(&p.name) {
                return;
            }
            let v = velocities
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; p.data.len()]);
            let r = match settings.kind {
                OptimKind::Sgd => sgd_step(
                    p.data,
                    p.grad,
                    v,
                    settings.lr,
                    settings.momentum,
                    settings.weight_decay,
                ),
                OptimKind::Lars => lars_step(
                    p.data,
                    p.grad,
                    v,
                    settings.lr,
                    settings.momentum,
                    settings.weight_decay,
                    settings.trust_coefficient,
                    p.excluded,
                ),
            };
            if let Err(e) = r {
                failure = Some(match e {
                    FktError::Divergence(msg) => {
                        FktError::Divergence(format!("{msg} ({})", p.name))
                    }
                    other => other,
                });
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    pub fn step(&mut self, model: &mut Model) -> Result<()> {
        self.step_filtered(model, |_| true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_vanilla_arithmetic() {
        let mut w = [1.0];
        let mut v = [0.0];
        sgd_step(&mut w, &[2.0], &mut v, 0.5, 0.0, 0.0).unwrap();
        assert_eq!(w[0], 0.0);
    }

    #[test]
    fn sgd_zero_grad_fixed_point() {
        let mut w = [3.0, -2.0];
        let mut v = [0.0, 0.0];
        sgd_step(&mut w, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(w, [3.0, -2.0]);
    }

    #[test]
    fn sgd_momentum_two_steps() {
        // v1 = 1, w1 = -1; v2 = 0.9 + 1 = 1.9, w2 = -2.9
        let mut w = [0.0];
        let mut v = [0.0];
        sgd_step(&mut w, &[1.0], &mut v, 1.0, 0.9, 0.0).unwrap();
        assert_eq!(w[0], -1.0);
        sgd_step(&mut w, &[1.0], &mut v, 1.0, 0.9, 0.0).unwrap();
        assert!((w[0] - (-2.9)).abs() < 1e-15);
    }

    #[test]
    fn lars_hand_computed_scalar() {
        // local_lr = 1 * |2| / |1| = 2; w <- 2 - 0.1 * 2 * 1 = 1.8
        let mut w = [2.0];
        let mut v = [0.0];
        lars_step(&mut w, &[1.0], &mut v, 0.1, 0.0, 0.0, 1.0, false).unwrap();
        assert!((w[0] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn lars_zero_grad_fixed_point() {
        let mut w = [2.0];
        let mut v = [0.0];
        lars_step(&mut w, &[0.0], &mut v, 0.1, 0.0, 0.0, 1.0, false).unwrap();
        assert_eq!(w[0], 2.0);
    }

    #[test]
    fn lars_excluded_follows_momentum_sgd() {
        // Excluded: no adaptation, no decay; v = lr*g each step.
        let mut w = [1.0];
        let mut v = [0.0];
        lars_step(&mut w, &[0.5], &mut v, 0.1, 0.0, 0.7, 1.0, true).unwrap();
        assert!((w[0] - (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut w = [1.0];
        let mut v = [0.0];
        let e = sgd_step(&mut w, &[f64::NAN], &mut v, 0.1, 0.0, 0.0).unwrap_err();
        assert!(matches!(e, FktError::Divergence(_)));
        let e = lars_step(&mut w, &[f64::INFINITY], &mut v, 0.1, 0.0, 0.0, 1.0, false)
            .unwrap_err();
        assert!(matches!(e, FktError::Divergence(_)));
    }
}
