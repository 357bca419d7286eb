use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::params::ParamStore;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {0:?}")]
    NonFiniteGradient(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            ..Self::adam(lr)
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Updates every parameter that currently holds a gradient. Nothing is
/// modified if any gradient is non-finite.
pub fn optimizer_step(store: &mut ParamStore, cfg: &OptimizerConfig) -> Result<(), OptimError> {
    if let Some((name, _)) = store.grads().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
        return Err(OptimError::NonFiniteGradient(name.to_owned()));
    }
    let (params, grads, adam) = store.split_for_update();
    for (name, g) in grads {
        let Some(p) = params.get_mut(name) else {
            continue;
        };
        match cfg.kind {
            OptimizerKind::Sgd => {
                for (w, gi) in p.data.iter_mut().zip(g) {
                    *w -= cfg.lr * gi;
                }
            }
            OptimizerKind::Adam => {
                let st = adam.entry(name.clone()).or_default();
                if st.m.len() != p.data.len() {
                    st.m = vec![0.0; p.data.len()];
                    st.v = vec![0.0; p.data.len()];
                    st.t = 0;
                }
                st.t += 1;
                let bc1 = 1.0 - cfg.beta1.powi(st.t as i32);
                let bc2 = 1.0 - cfg.beta2.powi(st.t as i32);
                for (((w, gi), m), v) in p.data.iter_mut().zip(g).zip(&mut st.m).zip(&mut st.v) {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                }
            }
        }
    }
    Ok(())
}
