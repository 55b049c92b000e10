use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub hyper: AdamConfig,
}

impl AdamState {
    pub fn new(params: &[Tensor], hyper: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState { step: 0, m: zeros(), v: zeros(), hyper }
    }
}

/// One bias-corrected Adam update over `params` in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Dimension(format!(
                "adam: param {i} has shape {:?}, gradient {:?}, moments {:?}",
                p.shape(),
                g.shape(),
                state.m[i].shape()
            )));
        }
    }
    state.step += 1;
    let AdamConfig { learning_rate: lr, beta1: b1, beta2: b2, epsilon: eps } = state.hyper;
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = vec![t(&[1.0, -2.0])];
        let mut s = AdamState::new(&p, AdamConfig::default());
        s.m[0] = t(&[0.5, 0.5]);
        s.v[0] = t(&[0.0, 0.0]);
        adam_step(&mut p, &[t(&[0.0, 0.0])], &mut s).unwrap();
        // m decays by beta1; v stays zero so the update is m̂/eps, nonzero.
        assert_eq!(s.m[0].data(), &[0.45, 0.45]);
        let mut p = vec![t(&[1.0, -2.0])];
        let mut s = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &[t(&[0.0, 0.0])], &mut s).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamConfig::default();
        let g = [0.3, -4.0, 1e-3];
        let mut p = vec![t(&[0.0, 0.0, 0.0])];
        let mut s = AdamState::new(&p, cfg);
        adam_step(&mut p, &[t(&g)], &mut s).unwrap();
        for (w, gi) in p[0].data().iter().zip(g) {
            // closed form: -lr * g / (|g| + eps)
            let oracle = -cfg.learning_rate * gi / (gi.abs() + cfg.epsilon);
            assert!((w - oracle).abs() < 1e-15);
            assert!((w + cfg.learning_rate * gi.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn two_steps_match_closed_form() {
        let cfg = AdamConfig::default();
        let (g1, g2) = (0.5, -0.2);
        let mut p = vec![t(&[1.0])];
        let mut s = AdamState::new(&p, cfg);
        adam_step(&mut p, &[t(&[g1])], &mut s).unwrap();
        adam_step(&mut p, &[t(&[g2])], &mut s).unwrap();
        let (b1, b2, lr, eps) = (cfg.beta1, cfg.beta2, cfg.learning_rate, cfg.epsilon);
        let u1 = g1 / (g1.abs() + eps);
        let m2 = (b1 * (1.0 - b1) * g1 + (1.0 - b1) * g2) / (1.0 - b1 * b1);
        let v2 = (b2 * (1.0 - b2) * g1 * g1 + (1.0 - b2) * g2 * g2) / (1.0 - b2 * b2);
        let oracle = 1.0 - lr * u1 - lr * m2 / (v2.sqrt() + eps);
        assert!((p[0].data()[0] - oracle).abs() < 1e-15);
        assert_eq!(s.step, 2);
    }

    #[test]
    fn bias_correction_is_applied() {
        // Without correction the first step would be lr·0.1g/(sqrt(0.001)|g|) ≈ 3.16·lr.
        let cfg = AdamConfig::default();
        let mut p = vec![t(&[0.0])];
        let mut s = AdamState::new(&p, cfg);
        adam_step(&mut p, &[t(&[2.0])], &mut s).unwrap();
        let uncorrected = -cfg.learning_rate * 0.1 * 2.0 / ((0.001f64 * 4.0).sqrt() + cfg.epsilon);
        assert!((p[0].data()[0] - uncorrected).abs() > 1e-3);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut p = vec![t(&[0.0, 1.0])];
        let mut s = AdamState::new(&p, AdamConfig::default());
        assert!(matches!(adam_step(&mut p, &[t(&[1.0])], &mut s), Err(Error::Dimension(_))));
    }
}
