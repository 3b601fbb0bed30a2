//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::params::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Cosine annealing from `base` to zero over `horizon` steps; constant
/// `base` when `horizon` is zero.
pub fn cosine_lr(base: f64, step: usize, horizon: usize) -> f64 {
    if horizon == 0 {
        return base;
    }
    let s = step.min(horizon) as f64 / horizon as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * s).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    // kept in f32 so a checkpoint restores the exact optimizer state
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        AdamW {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr` (schedule applied by the caller).
    /// `grads[i]` is the flat gradient of parameter `i`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::LengthMismatch {
                expected: self.m.len(),
                got: grads.len(),
            });
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = params.get_mut(id);
            let g = &grads[i];
            if g.len() != p.len() {
                return Err(Error::LengthMismatch {
                    expected: p.len(),
                    got: g.len(),
                });
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                let mut x = p.data[j] as f64;
                x -= lr * c.weight_decay * x;
                let mj = c.beta1 * m[j] as f64 + (1.0 - c.beta1) * g[j];
                let vj = c.beta2 * v[j] as f64 + (1.0 - c.beta2) * g[j] * g[j];
                m[j] = mj as f32;
                v[j] = vj as f32;
                let mh = mj / bc1;
                let vh = vj / bc2;
                x -= lr * mh / (vh.sqrt() + c.eps);
                p.data[j] = x as f32;
            }
        }
        Ok(())
    }

    /// Moments and step counter as named tensors, for checkpointing.
    pub fn state_tensors(&self, params: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.m.len() + 1);
        for (i, (name, t)) in params.named().enumerate() {
            out.push((
                format!("adam.m.{name}"),
                Tensor {
                    shape: t.shape.clone(),
                    data: self.m[i].clone(),
                },
            ));
            out.push((
                format!("adam.v.{name}"),
                Tensor {
                    shape: t.shape.clone(),
                    data: self.v[i].clone(),
                },
            ));
        }
        // split into two halves so counts above 2^24 survive f32 storage
        let lo = (self.step & 0xfff) as f32;
        let hi = (self.step >> 12) as f32;
        out.push((
            "adam.step".into(),
            Tensor {
                shape: vec![2],
                data: vec![lo, hi],
            },
        ));
        out
    }

    pub fn load_state(&mut self, params: &ParamStore, entries: &[(String, Tensor)]) -> Result<()> {
        let find = |key: &str| {
            entries
                .iter()
                .find(|(n, _)| n == key)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::MissingParameter(key.to_string()))
        };
        for (i, (name, t)) in params.named().enumerate() {
            let m = find(&format!("adam.m.{name}"))?;
            let v = find(&format!("adam.v.{name}"))?;
            if m.len() != t.len() || v.len() != t.len() {
                return Err(Error::LengthMismatch {
                    expected: t.len(),
                    got: m.len(),
                });
            }
            self.m[i].clone_from(&m.data);
            self.v[i].clone_from(&v.data);
        }
        let s = find("adam.step")?;
        if s.len() != 2 {
            return Err(Error::Format("adam.step must hold two values".into()));
        }
        self.step = s.data[0] as u64 | ((s.data[1] as u64) << 12);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.add_const("x", 1, 1, v);
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = one_param(1.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &[vec![3.0]], 0.01).unwrap();
        // bias-corrected first step is lr·sign(g) up to eps
        assert!((p.tensors()[0].data[0] as f64 - 0.99).abs() < 1e-6);
    }

    #[test]
    fn decoupled_decay_with_zero_grad() {
        let mut p = one_param(2.0);
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &[vec![0.0]], 0.5).unwrap();
        assert!((p.tensors()[0].data[0] as f64 - 2.0 * (1.0 - 0.05)).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = one_param(5.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        for k in 0..2000 {
            let x = p.tensors()[0].data[0] as f64;
            opt.step(&mut p, &[vec![2.0 * (x - 1.0)]], cosine_lr(0.05, k, 2000)).unwrap();
        }
        assert!((p.tensors()[0].data[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut p = one_param(0.7);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &[vec![0.0]], 0.1).unwrap();
        assert_eq!(p.tensors()[0].data[0], 0.7);
    }

    #[test]
    fn quadratic_2d_converges_in_200_steps() {
        let mut p = ParamStore::new();
        p.add(
            "w",
            Tensor {
                shape: vec![2],
                data: vec![1.0, -0.5],
            },
        );
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let w0 = p.tensors()[0].data[0];
        opt.step(&mut p, &[vec![1.0, -0.5]], 0.05).unwrap();
        assert!(p.tensors()[0].data[0].abs() < w0.abs());
        for k in 1..200 {
            let w = &p.tensors()[0].data;
            let g = vec![w[0] as f64, 3.0 * w[1] as f64];
            opt.step(&mut p, &[g], cosine_lr(0.05, k, 200)).unwrap();
        }
        let w = &p.tensors()[0].data;
        assert!(((w[0] * w[0] + w[1] * w[1]) as f64).sqrt() < 1e-2);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 100), 0.1);
        assert!((cosine_lr(0.1, 50, 100) - 0.05).abs() < 1e-12);
        assert!(cosine_lr(0.1, 100, 100).abs() < 1e-12);
        assert!(cosine_lr(0.1, 500, 100).abs() < 1e-12);
        assert_eq!(cosine_lr(0.1, 7, 0), 0.1);
    }

    #[test]
    fn state_roundtrip() {
        let mut p = one_param(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        for _ in 0..5000 {
            opt.step(&mut p, &[vec![0.25]], 1e-3).unwrap();
        }
        let st = opt.state_tensors(&p);
        let mut other = AdamW::new(AdamWConfig::default(), &p);
        other.load_state(&p, &st).unwrap();
        assert_eq!(other.step_count(), 5000);
        assert_eq!(other, opt);
    }
}
