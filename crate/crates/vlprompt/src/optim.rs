//! AdamW with decoupled weight decay and a step-decay learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::Module;

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 5e-2 }
    }
}

struct Slot {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Optimizer state. Moment buffers are keyed by parameter name, so the same
/// optimizer instance must always be stepped with the same model.
pub struct AdamW {
    cfg: AdamWConfig,
    t: u64,
    slots: BTreeMap<String, Slot>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, t: 0, slots: BTreeMap::new() }
    }

    /// One update. `grads` must contain an entry for every parameter the
    /// model visits; a missing or mis-sized gradient is an error.
    ///
    /// Update per parameter: decoupled decay `p -= lr*wd*p`, then the
    /// bias-corrected Adam step.
    pub fn step(
        &mut self,
        lr: f32,
        model: &mut impl Module,
        grads: &BTreeMap<String, Vec<f32>>,
    ) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2, eps, wd) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.cfg.weight_decay);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let mut err: Option<Error> = None;
        model.visit_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            let g = match grads.get(&p.name) {
                Some(g) if g.len() == p.data.len() => g,
                Some(g) => {
                    err = Some(Error::Autodiff(format!(
                        "gradient for {} has {} values, parameter has {}",
                        p.name,
                        g.len(),
                        p.data.len()
                    )));
                    return;
                }
                None => {
                    err = Some(Error::Autodiff(format!("missing gradient for parameter {}", p.name)));
                    return;
                }
            };
            let slot = self.slots.entry(p.name.clone()).or_insert_with(|| Slot {
                m: vec![0.0; p.data.len()],
                v: vec![0.0; p.data.len()],
            });
            #[allow(clippy::needless_range_loop)] // four arrays advance in lockstep
            for i in 0..p.data.len() {
                p.data[i] -= lr * wd * p.data[i];
                slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g[i];
                slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// Step-decay schedule: the base rate is multiplied by 0.1 at each milestone.
/// `step` is zero-based; a milestone `m` takes effect from step `m` onward.
pub fn lr_at_step(base_lr: f32, milestones: &[usize], step: usize) -> f32 {
    let hits = milestones.iter().filter(|&&m| step >= m).count();
    base_lr * 0.1f32.powi(hits as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_decays_at_milestones() {
        let ms = [6, 10];
        assert_eq!(lr_at_step(1e-4, &ms, 0), 1e-4);
        assert_eq!(lr_at_step(1e-4, &ms, 5), 1e-4);
        assert!((lr_at_step(1e-4, &ms, 6) - 1e-5).abs() < 1e-12);
        assert!((lr_at_step(1e-4, &ms, 10) - 1e-6).abs() < 1e-13);
        assert!((lr_at_step(1e-4, &ms, 11) - 1e-6).abs() < 1e-13);
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut lin = Linear::init("t", 2, 2, &mut rng);
        let mut opt = AdamW::new(AdamWConfig::default());
        let grads = BTreeMap::new();
        assert!(opt.step(1e-3, &mut lin, &grads).is_err());
    }

    #[test]
    fn single_step_matches_closed_form() {
        // One parameter, gradient 1: after one step with zero init moments,
        // mhat = g, vhat = g*g, so the Adam term is lr * 1/(1 + eps).
        let mut lin = Linear { w: crate::nn::Param::new("p.w", &[1, 1], vec![1.0]), b: crate::nn::Param::new("p.b", &[1], vec![0.0]) };
        let cfg = AdamWConfig { weight_decay: 0.5, ..Default::default() };
        let mut opt = AdamW::new(cfg);
        let mut grads = BTreeMap::new();
        grads.insert("p.w".to_string(), vec![1.0f32]);
        grads.insert("p.b".to_string(), vec![0.0f32]);
        opt.step(0.1, &mut lin, &grads).unwrap();
        // decay: 1 - 0.1*0.5 = 0.95; adam: -0.1 * 1/(1+1e-8)
        let want = 0.95 - 0.1 * (1.0 / (1.0 + 1e-8f32));
        assert!((lin.w.data[0] - want).abs() < 1e-6, "{}", lin.w.data[0]);
        // zero gradient: decay only.
        assert_eq!(lin.b.data[0], 0.0);
    }

    #[test]
    fn weight_decay_is_decoupled_from_moments() {
        // With zero gradient, the update must be exactly the decay shrink.
        let mut lin = Linear { w: crate::nn::Param::new("q.w", &[1, 1], vec![2.0]), b: crate::nn::Param::new("q.b", &[1], vec![0.0]) };
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.1, ..Default::default() });
        let mut grads = BTreeMap::new();
        grads.insert("q.w".to_string(), vec![0.0f32]);
        grads.insert("q.b".to_string(), vec![0.0f32]);
        opt.step(0.5, &mut lin, &grads).unwrap();
        assert!((lin.w.data[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-7);
    }
}
