use serde::{Deserialize, Serialize};

use super::RegressorParams;
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

/// First and second moment estimates plus the number of steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: RegressorParams,
    pub v: RegressorParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &RegressorParams) -> Self {
        Self {
            m: RegressorParams::zeros_like(params),
            v: RegressorParams::zeros_like(params),
            step: 0,
        }
    }
}

/// One Adam update of every tensor.
pub fn adam_step(
    params: &mut RegressorParams,
    grads: &RegressorParams,
    cfg: &AdamConfig,
    state: &mut AdamState,
) -> Result<()> {
    let n = grads.tensors().len();
    adam_step_masked(params, grads, cfg, state, &vec![true; n])
}

/// Adam update restricted to tensors whose `mask` entry is `true`. Frozen
/// tensors keep their values and moments.
pub fn adam_step_masked(
    params: &mut RegressorParams,
    grads: &RegressorParams,
    cfg: &AdamConfig,
    state: &mut AdamState,
    mask: &[bool],
) -> Result<()> {
    let grad_tensors = grads.tensors();
    if grad_tensors.len() != mask.len() || params.tensor_shapes() != grads.tensor_shapes() {
        return Err(Error::DimensionMismatch {
            context: "adam step tensors",
            expected: params.tensors().len(),
            found: grad_tensors.len(),
        });
    }
    for (ti, g) in grad_tensors.iter().enumerate() {
        if let Some(index) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { tensor: ti, index });
        }
    }
    state.step += 1;
    let step = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(step);
    let bc2 = 1.0 - cfg.beta2.powi(step);
    let p_tensors = params.tensors_mut();
    let m_tensors = state.m.tensors_mut();
    let v_tensors = state.v.tensors_mut();
    for ((((p, g), m), v), &on) in p_tensors
        .into_iter()
        .zip(grad_tensors)
        .zip(m_tensors)
        .zip(v_tensors)
        .zip(mask)
    {
        if !on {
            continue;
        }
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::ObjectiveKind;
    use crate::net::{ArchSpec, NetConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> RegressorParams {
        let arch = ArchSpec {
            hidden: 4,
            depth: 1,
            time_dim: 2,
            ..ArchSpec::default()
        };
        let cfg = NetConfig::new(1, 0, ObjectiveKind::Endpoint, arch).unwrap();
        RegressorParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = params();
        let before = p.clone();
        let g = RegressorParams::zeros_like(&p);
        let mut st = AdamState::new(&p);
        for _ in 0..10 {
            adam_step(&mut p, &g, &AdamConfig::default(), &mut st).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn constant_unit_gradient_moves_by_lr() {
        let mut p = params();
        let mut g = RegressorParams::zeros_like(&p);
        let last = g.tensors().len() - 1;
        g.tensors_mut()[last][0] = 1.0;
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(&p);
        let mut prev = p.tensors()[last][0];
        let mut delta = 0.0;
        for _ in 0..200 {
            adam_step(&mut p, &g, &cfg, &mut st).unwrap();
            let cur = p.tensors()[last][0];
            delta = prev - cur;
            prev = cur;
        }
        assert!((delta - cfg.lr).abs() < 1e-8, "{delta}");
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut p = params();
        let before = p.clone();
        let mut g = RegressorParams::zeros_like(&p);
        g.tensors_mut()[2][1] = f64::NAN;
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &g, &AdamConfig::default(), &mut st).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { tensor: 2, index: 1 }));
        assert_eq!(p, before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn masked_tensors_stay_frozen() {
        let mut p = params();
        let before = p.clone();
        let mut g = RegressorParams::zeros_like(&p);
        for t in g.tensors_mut() {
            t.fill(0.5);
        }
        let mut mask = vec![true; g.tensors().len()];
        mask[0] = false;
        let mut st = AdamState::new(&p);
        adam_step_masked(&mut p, &g, &AdamConfig::default(), &mut st, &mask).unwrap();
        assert_eq!(p.tensors()[0], before.tensors()[0]);
        assert_ne!(p.tensors()[1], before.tensors()[1]);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = params();
            let mut g = RegressorParams::zeros_like(&p);
            for (k, t) in g.tensors_mut().into_iter().enumerate() {
                for (i, v) in t.iter_mut().enumerate() {
                    *v = ((k * 31 + i * 7) % 13) as f64 / 13.0 - 0.5;
                }
            }
            let mut st = AdamState::new(&p);
            for _ in 0..25 {
                adam_step(&mut p, &g, &AdamConfig::default(), &mut st).unwrap();
            }
            p
        };
        let a = run();
        let b = run();
        let bits = |p: &RegressorParams| -> Vec<u64> {
            p.tensors().iter().flat_map(|t| t.iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }
}
