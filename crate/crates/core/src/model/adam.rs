use serde::{Deserialize, Serialize};

use super::params::{Grads, GruSeq2Seq};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments, flattened in canonical parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Self {
            config,
            t: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn for_model(config: AdamConfig, model: &GruSeq2Seq) -> Self {
        Self::new(config, model.num_params())
    }
}

/// One bias-corrected Adam update. Non-finite gradients abort with `TrainingDiverged`
/// and leave both model and state untouched.
pub fn adam_step(model: &mut GruSeq2Seq, grads: &Grads, state: &mut AdamState) -> Result<()> {
    let n = model.num_params();
    if grads.num_params() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Shape(format!(
            "adam: model has {n} params, grads {}, state {}",
            grads.num_params(),
            state.m.len()
        )));
    }
    if let Some((i, g)) = grads.values().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(Error::TrainingDiverged(format!(
            "non-finite gradient {g} at parameter {i}"
        )));
    }

    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (((p, g), m), v) in model
        .values_mut()
        .zip(grads.values())
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut Grads, max_norm: f64) {
    let norm = grads.l2_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::GruArch;

    fn tiny() -> GruArch {
        GruArch {
            input_dim: 1,
            hidden_dim: 1,
            num_layers: 1,
            horizon_in: 1,
            horizon_out: 1,
        }
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut model = GruSeq2Seq::init(tiny(), 1);
        let before = model.clone();
        let mut state = AdamState::for_model(AdamConfig::default(), &model);
        adam_step(&mut model, &GruSeq2Seq::zeros(tiny()), &mut state).unwrap();
        assert_eq!(model, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let mut model = GruSeq2Seq::zeros(tiny());
        let mut grads = GruSeq2Seq::zeros(tiny());
        grads.values_mut().for_each(|g| *g = 1.0);
        let mut state = AdamState::for_model(AdamConfig::default(), &model);
        adam_step(&mut model, &grads, &mut state).unwrap();
        // m̂ = v̂ = 1 after bias correction, so Δ = -lr / (1 + eps)
        let expected = -1e-3 / (1.0 + 1e-8);
        for p in model.values() {
            assert!((p - expected).abs() < 1e-15);
            assert!((p + 9.99999e-4).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicate_states_step_identically() {
        let mut a = GruSeq2Seq::init(tiny(), 4);
        let mut b = a.clone();
        let mut grads = GruSeq2Seq::zeros(tiny());
        grads
            .values_mut()
            .enumerate()
            .for_each(|(i, g)| *g = (i as f64 - 3.0) * 0.7);
        let mut sa = AdamState::for_model(AdamConfig::default(), &a);
        let mut sb = sa.clone();
        for _ in 0..3 {
            adam_step(&mut a, &grads, &mut sa).unwrap();
            adam_step(&mut b, &grads, &mut sb).unwrap();
        }
        assert!(a
            .values()
            .zip(b.values())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(sa, sb);
    }

    #[test]
    fn non_finite_gradient_diverges() {
        let mut model = GruSeq2Seq::init(tiny(), 1);
        let before = model.clone();
        let mut grads = GruSeq2Seq::zeros(tiny());
        *grads.values_mut().nth(2).unwrap() = f64::NAN;
        let mut state = AdamState::for_model(AdamConfig::default(), &model);
        assert!(matches!(
            adam_step(&mut model, &grads, &mut state),
            Err(Error::TrainingDiverged(_))
        ));
        assert_eq!(model, before);
        assert_eq!(state.t, 0);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut grads = GruSeq2Seq::zeros(tiny());
        grads.values_mut().for_each(|g| *g = 10.0);
        clip_global_norm(&mut grads, 1.0);
        assert!((grads.l2_norm() - 1.0).abs() < 1e-12);
    }
}
