use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
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
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// Advances the step counter and applies one update.
    pub fn update(&mut self, cfg: &AdamConfig, params: &mut [f64], grads: &[f64]) {
        self.step += 1;
        let step = self.step;
        adam_step(params, grads, cfg, &mut self.m, &mut self.v, step);
    }
}

/// Bias-corrected Adam update for step `step` (1-based).
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    cfg: &AdamConfig,
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
) {
    assert_eq!(params.len(), grads.len(), "parameter/gradient length mismatch");
    assert_eq!(params.len(), m.len());
    assert_eq!(params.len(), v.len());
    let t = step.max(1) as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Rescales `grads` in place so its L2 norm is at most `max_norm`. Returns the original norm.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0, 3.5];
        let before = p.clone();
        let mut st = AdamState::new(3);
        st.update(&AdamConfig::default(), &mut p, &[0.0; 3]);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_scalar_by_hand() {
        // m = 0.05, v = 0.00025; m_hat = 0.5, v_hat = 0.25;
        // update = -lr * 0.5 / (0.5 + 1e-8).
        let cfg = AdamConfig::default();
        let mut p = [2.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        adam_step(&mut p, &[0.5], &cfg, &mut m, &mut v, 1);
        let expected = 2.0 - 1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((m[0] - 0.05).abs() < 1e-15);
        assert!((v[0] - 0.00025).abs() < 1e-15);
    }

    #[test]
    fn identical_calls_are_identical() {
        let cfg = AdamConfig::default();
        let run = || {
            let mut p = vec![0.3, -0.7];
            let mut st = AdamState::new(2);
            for k in 0..5 {
                st.update(&cfg, &mut p, &[0.1 * k as f64, -0.4]);
            }
            (p, st)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clip_bounds_norm() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }
}
