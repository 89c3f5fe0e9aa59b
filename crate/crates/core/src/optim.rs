//! Optimisers over the network's parameter list.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reconstruction::{Gradients, Param};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adam moments with a per-tensor trust ratio `|w| / |update|`.
    #[default]
    Lamb,
    /// Adam with decoupled weight decay.
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Lamb,
            learning_rate: 6e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate.is_finite()
            && self.learning_rate > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "bad optimizer settings {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &[Param]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

pub fn apply_update(
    cfg: &OptimizerConfig,
    state: &mut OptimizerState,
    params: &mut [Param],
    grads: &Gradients,
) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let mut update = Vec::new();
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(&grads.0)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        update.clear();
        for (((w, gi), mi), vi) in p.data.iter().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let adam = (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
            update.push(match cfg.kind {
                OptimizerKind::Lamb => adam + cfg.weight_decay * w,
                OptimizerKind::Adam => adam,
            });
        }
        let scale = match cfg.kind {
            OptimizerKind::Lamb => {
                let wn = p.data.iter().map(|x| x * x).sum::<f64>().sqrt();
                let un = update.iter().map(|x| x * x).sum::<f64>().sqrt();
                if wn > 0.0 && un > 0.0 {
                    wn / un
                } else {
                    1.0
                }
            }
            OptimizerKind::Adam => 1.0,
        };
        for (w, u) in p.data.iter_mut().zip(&update) {
            if cfg.kind == OptimizerKind::Adam {
                *w -= cfg.learning_rate * cfg.weight_decay * *w;
            }
            *w -= cfg.learning_rate * scale * u;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(data: Vec<f64>) -> Param {
        Param {
            name: "p".into(),
            shape: vec![data.len()],
            data,
        }
    }

    #[test]
    fn lamb_step_length_is_lr_times_weight_norm() {
        let cfg = OptimizerConfig::default();
        let mut params = vec![param(vec![3.0, 4.0])];
        let mut st = OptimizerState::new(&params);
        apply_update(
            &cfg,
            &mut st,
            &mut params,
            &Gradients(vec![vec![0.5, -2.0]]),
        );
        let moved = ((params[0].data[0] - 3.0).powi(2) + (params[0].data[1] - 4.0).powi(2)).sqrt();
        assert!((moved - cfg.learning_rate * 5.0).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_sign_times_lr() {
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Adam,
            weight_decay: 0.0,
            eps: 1e-12,
            ..Default::default()
        };
        let mut params = vec![param(vec![1.0, 1.0])];
        let mut st = OptimizerState::new(&params);
        apply_update(
            &cfg,
            &mut st,
            &mut params,
            &Gradients(vec![vec![2.0, -0.1]]),
        );
        assert!((params[0].data[0] - (1.0 - 6e-3)).abs() < 1e-9);
        assert!((params[0].data[1] - (1.0 + 6e-3)).abs() < 1e-9);
    }
}
