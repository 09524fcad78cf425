//! Adam with bias correction, global-norm gradient clipping, and the linear
//! warm-up learning-rate schedule (constant after warm-up).

use crate::tensor::Tensor;
use crate::{NumError, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment state plus a shared step counter.
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl Adam {
    pub fn new(param_sizes: &[usize]) -> Self {
        Adam {
            cfg: AdamConfig::default(),
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn with_config(mut self, cfg: AdamConfig) -> Self {
        self.cfg = cfg;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over all parameters. Rejects the whole step (state and
    /// parameters untouched) if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f32>], lr: f32) -> Result<()> {
        assert_eq!(params.len(), grads.len(), "param/grad count mismatch");
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.len() {
                return Err(NumError::invalid(format!(
                    "gradient {i} has {} elements, parameter has {}",
                    g.len(),
                    p.numel()
                )));
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(NumError::NonFiniteGrad { index: i });
            }
        }
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - (self.cfg.beta1 as f64).powf(t);
        let bc2 = 1.0 - (self.cfg.beta2 as f64).powf(t);
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let data = p.data_mut();
            for i in 0..data.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1 as f32;
                let v_hat = v[i] / bc2 as f32;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Flatten optimizer state into named tensors for checkpointing.
    pub fn export_state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(self.m.len() * 2 + 1);
        out.push((
            "opt.t".to_string(),
            Tensor::new(&[1], vec![self.t as f32]).unwrap(),
        ));
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            out.push((format!("opt.m.{i}"), Tensor::new(&[m.len()], m.clone()).unwrap()));
            out.push((format!("opt.v.{i}"), Tensor::new(&[v.len()], v.clone()).unwrap()));
        }
        out
    }

    /// Restore state exported by [`Adam::export_state`]. Entries not present
    /// are left as-is.
    pub fn import_state(&mut self, entries: &[(String, Tensor)]) {
        for (name, t) in entries {
            if name == "opt.t" {
                self.t = t.data()[0] as u64;
            } else if let Some(idx) = name.strip_prefix("opt.m.").and_then(|s| s.parse::<usize>().ok()) {
                if idx < self.m.len() && self.m[idx].len() == t.numel() {
                    self.m[idx].copy_from_slice(t.data());
                }
            } else if let Some(idx) = name.strip_prefix("opt.v.").and_then(|s| s.parse::<usize>().ok()) {
                if idx < self.v.len() && self.v[idx].len() == t.numel() {
                    self.v[idx].copy_from_slice(t.data());
                }
            }
        }
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f32) -> f32 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g {
            sq += (v as f64) * (v as f64);
        }
    }
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Linear warm-up to `base_lr` over `warmup_steps`, constant afterwards.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub base_lr: f32,
    pub warmup_steps: u64,
}

impl LrSchedule {
    pub fn new(base_lr: f32, warmup_steps: u64) -> Self {
        assert!(base_lr > 0.0, "base_lr must be positive");
        LrSchedule { base_lr, warmup_steps }
    }

    pub fn lr_at(&self, step: u64) -> f32 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.base_lr
        } else {
            self.base_lr * step as f32 / self.warmup_steps as f32
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_warmup_endpoints() {
        let s = LrSchedule::new(1e-4, 5000);
        assert_eq!(s.lr_at(0), 0.0);
        assert!((s.lr_at(2500) - 5e-5).abs() < 1e-12);
        assert!((s.lr_at(5000) - 1e-4).abs() < 1e-12);
        assert!((s.lr_at(50000) - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn lr_non_decreasing_then_constant() {
        let s = LrSchedule::new(3e-3, 100);
        let mut prev = -1.0f32;
        for step in 0..=100 {
            let lr = s.lr_at(step);
            assert!(lr >= prev);
            prev = lr;
        }
        assert_eq!(s.lr_at(101), s.lr_at(100));
    }

    #[test]
    fn first_step_moves_by_lr_sign() {
        // With |g| >> eps the bias-corrected first step is ~ -lr * sign(g).
        let mut p = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
        let g = vec![vec![0.5f32, -02.0]];
        let mut adam = Adam::new(&[2]);
        adam.step(&mut [&mut p], &g, 0.01).unwrap();
        assert!((p.data()[0] - (1.0 - 0.01)).abs() < 1e-5);
        assert!((p.data()[1] - (1.0 + 0.01)).abs() < 1e-5);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = Tensor::new(&[3], vec![0.3, -0.7, 2.0]).unwrap();
        let before = p.data().to_vec();
        let mut adam = Adam::new(&[3]);
        for _ in 0..10 {
            adam.step(&mut [&mut p], &[vec![0.0; 3]], 0.1).unwrap();
        }
        assert_eq!(p.data(), before.as_slice());
        assert_eq!(adam.step_count(), 10);
    }

    #[test]
    fn quadratic_descends() {
        // f(x) = x^2 from x=1 with lr=0.1: strictly decreasing toward 0.
        let mut x = Tensor::new(&[1], vec![1.0]).unwrap();
        let mut adam = Adam::new(&[1]);
        let mut prev = 1.0f32;
        for _ in 0..2 {
            let g = vec![vec![2.0 * x.data()[0]]];
            adam.step(&mut [&mut x], &g, 0.1).unwrap();
            let now = x.data()[0];
            assert!(now < prev && now > -1.0);
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = Tensor::new(&[1], vec![1.0]).unwrap();
        let mut adam = Adam::new(&[1]);
        let err = adam.step(&mut [&mut p], &[vec![f32::NAN]], 0.1);
        assert!(matches!(err, Err(NumError::NonFiniteGrad { .. })));
        assert_eq!(p.data()[0], 1.0);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = vec![vec![3.0f32, 4.0]];
        let norm = clip_global_norm(&mut g, 1.0);
        assert!((norm - 5.0).abs() < 1e-6);
        let after: f32 = g[0].iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((after - 1.0).abs() < 1e-6);
    }
}
