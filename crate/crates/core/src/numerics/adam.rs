use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// Moment accumulators, created lazily per parameter on its first update.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
/// Parameters without a gradient entry are left untouched.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
) -> Result<()> {
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    if !(lr > 0.0) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::invalid(format!(
                "gradient shape {:?} does not match parameter `{name}` {:?}",
                g.shape(),
                p.shape()
            )));
        }
        for acc in [state.first.get(name), state.second.get(name)].into_iter().flatten() {
            if acc.shape() != p.shape() {
                return Err(Error::invalid(format!("moment shape mismatch for `{name}`")));
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let entries = p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
            .zip(g.data());
        for (((p, m), v), &g) in entries {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(x: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::scalar(x));
        p
    }

    fn grad(g: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("x".to_string(), Tensor::scalar(g))])
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = single(1.25);
        let mut st = AdamState::new(AdamConfig::default());
        for _ in 0..5 {
            adam_step(&mut p, &grad(0.0), &mut st).unwrap();
        }
        assert_eq!(p.get("x").unwrap().item(), 1.25);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2 after bias correction, so the step is
        // lr * g / (|g| + eps).
        let mut p = single(0.0);
        let mut st = AdamState::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        adam_step(&mut p, &grad(1.0), &mut st).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.get("x").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn quadratic_descent_has_monotone_tail() {
        let mut p = single(5.0);
        let mut st = AdamState::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        let mut trace = vec![];
        for _ in 0..200 {
            let x = p.get("x").unwrap().item();
            adam_step(&mut p, &grad(2.0 * x), &mut st).unwrap();
            trace.push(p.get("x").unwrap().item().abs());
        }
        // x starts far from the optimum, so the first 30 steps travel
        // straight down without overshoot.
        assert!(trace[..30].windows(2).all(|w| w[1] < w[0]));
        assert!(trace.last().unwrap() < &0.5);
    }

    #[test]
    fn rejects_shape_mismatch_and_bad_lr() {
        let mut p = single(0.0);
        let mut st = AdamState::new(AdamConfig::default());
        let bad = BTreeMap::from([("x".to_string(), Tensor::from_vec(vec![1.0, 2.0]))]);
        assert!(adam_step(&mut p, &bad, &mut st).is_err());
        assert_eq!(st.step, 0);
        let mut st = AdamState::new(AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        });
        assert!(adam_step(&mut p, &grad(1.0), &mut st).is_err());
    }
}
