//! Adam with bias correction and optional global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{IcpoError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm cap; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
        }
    }
}

/// First and second moments plus the update count used for bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One in-place update. Returns the pre-clip gradient norm.
pub fn optimizer_update(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<f64> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(IcpoError::Size(format!(
            "params {}, grads {}, moments {}/{}",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(IcpoError::Numerical(format!("non-finite gradient at {i}")));
    }
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    let scale = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        cfg.grad_clip / norm
    } else {
        1.0
    };
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i] * scale;
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = state.m[i] / bc1;
        let vh = state.v[i] / bc2;
        params[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let cfg = AdamConfig::default();
        let mut p = vec![0.5, -1.0, 2.0];
        let mut st = AdamState::new(3);
        optimizer_update(&mut p, &[0.0; 3], &mut st, &cfg).unwrap();
        assert_eq!(p, vec![0.5, -1.0, 2.0]);

        st.m = vec![1.0, -2.0, 0.5];
        st.v = vec![4.0, 1.0, 0.25];
        let before = (st.m.clone(), st.v.clone());
        let mut st2 = st.clone();
        // with zero moments params stay put; with nonzero moments only decay is checked
        optimizer_update(&mut p.clone(), &[0.0; 3], &mut st2, &cfg).unwrap();
        for i in 0..3 {
            assert_eq!(st2.m[i], 0.9 * before.0[i]);
            assert_eq!(st2.v[i], 0.999 * before.1[i]);
        }
    }

    #[test]
    fn quadratic_bowl_descends_monotonically() {
        let cfg = AdamConfig {
            lr: 0.01,
            grad_clip: 0.0,
            ..Default::default()
        };
        let mut x = vec![1.0, -0.7, 0.3, 2.0];
        let mut st = AdamState::new(4);
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let mut prev = f(&x);
        for _ in 0..100 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            optimizer_update(&mut x, &g, &mut st, &cfg).unwrap();
            let now = f(&x);
            assert!(now < prev, "{now} >= {prev}");
            prev = now;
        }
    }

    #[test]
    fn deterministic_updates() {
        let run = || {
            let mut x = vec![0.1, 0.2];
            let mut st = AdamState::new(2);
            for k in 0..50 {
                let g = vec![(k as f64).sin(), x[0] - x[1]];
                optimizer_update(&mut x, &g, &mut st, &AdamConfig::default()).unwrap();
            }
            x
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping_caps_first_step() {
        let cfg = AdamConfig {
            grad_clip: 1.0,
            ..Default::default()
        };
        let mut st = AdamState::new(2);
        let mut x = vec![0.0, 0.0];
        let norm = optimizer_update(&mut x, &[30.0, 40.0], &mut st, &cfg).unwrap();
        assert_eq!(norm, 50.0);
        assert!((st.m[0] - 0.1 * 0.6).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(2);
        assert!(matches!(
            optimizer_update(&mut [0.0, 0.0], &[f64::NAN, 0.0], &mut st, &cfg),
            Err(IcpoError::Numerical(_))
        ));
        assert!(matches!(
            optimizer_update(&mut [0.0], &[0.0, 0.0], &mut st, &cfg),
            Err(IcpoError::Size(_))
        ));
    }
}
