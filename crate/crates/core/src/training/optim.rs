//! AdamW with per-parameter-group learning rates, warmup + cosine schedule,
//! and global-norm gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    /// Updates applied to this parameter; drives bias correction.
    pub step: u64,
}

/// Decoupled-weight-decay Adam. Parameters without a gradient in a step are
/// left untouched, including their decay and step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: BTreeMap<String, Moments>,
    /// Optimizer steps taken; monotone.
    pub steps: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            state: BTreeMap::new(),
            steps: 0,
        }
    }

    /// `lr_for(name)` gives the learning rate of each parameter's group for
    /// this step.
    pub fn step(
        &mut self,
        params: Vec<(String, &mut Tensor)>,
        grads: &BTreeMap<String, Tensor>,
        lr_for: impl Fn(&str) -> f64,
    ) -> Result<()> {
        let c = self.config;
        for (name, p) in params {
            let Some(g) = grads.get(&name) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            let lr = lr_for(&name);
            let st = self.state.entry(name).or_insert_with(|| Moments {
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
                step: 0,
            });
            st.step += 1;
            let bc1 = 1.0 - c.beta1.powi(st.step as i32);
            let bc2 = 1.0 - c.beta2.powi(st.step as i32);
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *w);
            }
            p.check_finite("adamw")?;
        }
        self.steps += 1;
        Ok(())
    }
}

/// Linear warmup to 1, then cosine decay to `floor`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub floor: f64,
}

impl Schedule {
    /// Warmup over 5% of the run (at least one step), decay to 0.1 of peak.
    pub fn standard(total_steps: usize) -> Self {
        Schedule {
            total_steps,
            warmup_steps: (total_steps as f64 * 0.05).ceil().max(1.0) as usize,
            floor: 0.1,
        }
    }

    pub fn multiplier(&self, step: usize) -> f64 {
        let w = self.warmup_steps.max(1);
        if step < w {
            return (step + 1) as f64 / w as f64;
        }
        let decay_steps = self.total_steps.saturating_sub(w).max(1);
        let t = ((step + 1 - w) as f64 / decay_steps as f64).min(1.0);
        self.floor + (1.0 - self.floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = Schedule::standard(1000);
        assert_eq!(s.warmup_steps, 50);
        assert!(s.multiplier(0) < s.multiplier(49));
        assert_eq!(s.multiplier(49), 1.0);
        let mut prev = s.multiplier(49);
        for step in 50..1000 {
            let m = s.multiplier(step);
            assert!(m < prev && m > 0.0 && m <= 1.0, "step {step}");
            prev = m;
        }
        assert!((s.multiplier(999) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = Tensor::vector(vec![1.0, -2.0]).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::vector(vec![0.5, -3.0]).unwrap());
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        opt.step(vec![("p".to_string(), &mut p)], &grads, |_| 0.1).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 1.9).abs() < 1e-6);
        assert_eq!(opt.steps, 1);
        assert_eq!(opt.state["p"].step, 1);
    }

    #[test]
    fn zero_lr_leaves_parameters_and_missing_grads_are_skipped() {
        let mut p = Tensor::vector(vec![1.0, -2.0]).unwrap();
        let mut q = Tensor::vector(vec![3.0]).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::vector(vec![0.5, -3.0]).unwrap());
        let mut opt = AdamW::new(AdamWConfig::default());
        let before = (p.clone(), q.clone());
        opt.step(vec![("p".into(), &mut p), ("q".into(), &mut q)], &grads, |_| 0.0)
            .unwrap();
        assert_eq!((p, q), before);
        assert!(!opt.state.contains_key("q"));
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::vector(vec![3.0]).unwrap());
        grads.insert("b".to_string(), Tensor::vector(vec![4.0]).unwrap());
        assert_eq!(clip_global_norm(&mut grads, 1.0), 5.0);
        assert!((grads["a"].item() - 0.6).abs() < 1e-15);
        assert!((grads["b"].item() - 0.8).abs() < 1e-15);
    }
}
