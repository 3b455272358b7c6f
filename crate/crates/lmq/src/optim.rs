//! First-order optimizers (Adam, AdamW with decoupled weight decay) and the
//! cosine learning-rate schedule.

use crate::params::ParamStore;
use crate::tape::Arr;
use crate::{LmqError, Result};

/// Cosine annealing from `lr_init` (step 0) to `lr_min` (step == total).
/// The endpoints are returned exactly, not through the cosine formula, so
/// configured rates survive floating-point round-trips untouched.
pub fn cosine_lr(step: u64, total_steps: u64, lr_init: f64, lr_min: f64) -> Result<f64> {
    if total_steps < 1 {
        return Err(LmqError::invalid("total_steps must be >= 1"));
    }
    if step > total_steps {
        return Err(LmqError::invalid(format!(
            "step {step} out of range 0..={total_steps}"
        )));
    }
    Ok(if step == 0 {
        lr_init
    } else if step == total_steps {
        lr_min
    } else {
        let t = step as f64 / total_steps as f64;
        lr_min + 0.5 * (lr_init - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
    })
}

#[derive(Clone, Copy, Debug)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 recovers plain Adam.
    pub weight_decay: f64,
}

impl OptimConfig {
    pub fn adam() -> Self {
        OptimConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn adamw(weight_decay: f64) -> Self {
        OptimConfig {
            weight_decay,
            ..Self::adam()
        }
    }
}

/// Adam/AdamW state: first and second moments per parameter, in store order.
pub struct Optimizer {
    cfg: OptimConfig,
    m: Vec<Arr>,
    v: Vec<Arr>,
    step_count: u64,
}

impl Optimizer {
    pub fn new(params: &ParamStore, cfg: OptimConfig) -> Self {
        let m = params.iter().map(|(_, p)| Arr::zeros(p.raw_dim())).collect();
        let v = params.iter().map(|(_, p)| Arr::zeros(p.raw_dim())).collect();
        Optimizer {
            cfg,
            m,
            v,
            step_count: 0,
        }
    }

    /// Rebuilds an optimizer from checkpointed state.
    pub fn restore(
        params: &ParamStore,
        cfg: OptimConfig,
        m: Vec<Arr>,
        v: Vec<Arr>,
        step_count: u64,
    ) -> Result<Self> {
        if m.len() != params.len() || v.len() != params.len() {
            return Err(LmqError::Checkpoint(format!(
                "optimizer state for {} parameters, store has {}",
                m.len(),
                params.len()
            )));
        }
        for ((mi, vi), (name, p)) in m.iter().zip(v.iter()).zip(params.iter()) {
            if mi.shape() != p.shape() || vi.shape() != p.shape() {
                return Err(LmqError::Checkpoint(format!(
                    "optimizer state shape mismatch for {name}"
                )));
            }
        }
        Ok(Optimizer {
            cfg,
            m,
            v,
            step_count,
        })
    }

    pub fn config(&self) -> OptimConfig {
        self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn state(&self) -> (&[Arr], &[Arr], u64) {
        (&self.m, &self.v, self.step_count)
    }

    /// One update. Parameters whose gradient is `None` are left untouched
    /// (no decay, no moment update), mirroring common framework behavior.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Arr>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "gradient/parameter count mismatch");
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.get_mut(crate::params::ParamId(i));
            debug_assert_eq!(g.shape(), p.shape());
            let ps = p.as_slice_mut().unwrap();
            let ms = self.m[i].as_slice_mut().unwrap();
            let vs = self.v[i].as_slice_mut().unwrap();
            let gs = g.as_slice().unwrap();
            let (b1, b2, eps, wd) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.cfg.weight_decay);
            for e in 0..ps.len() {
                if wd > 0.0 {
                    ps[e] *= 1.0 - lr * wd;
                }
                ms[e] = b1 * ms[e] + (1.0 - b1) * gs[e];
                vs[e] = b2 * vs[e] + (1.0 - b2) * gs[e] * gs[e];
                let mh = ms[e] / bc1;
                let vh = vs[e] / bc2;
                ps[e] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{zeros, ParamStore};
    use ndarray::IxDyn;

    #[test]
    fn cosine_endpoints_are_exact() {
        assert_eq!(cosine_lr(0, 1000, 2e-4, 1e-6).unwrap(), 2e-4);
        assert_eq!(cosine_lr(1000, 1000, 2e-4, 1e-6).unwrap(), 1e-6);
    }

    #[test]
    fn cosine_midpoint_closed_form() {
        let v = cosine_lr(500, 1000, 2e-4, 1e-6).unwrap();
        assert!((v - 1.005e-4).abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_out_of_range() {
        assert!(cosine_lr(11, 10, 1e-3, 1e-6).is_err());
        assert!(cosine_lr(0, 0, 1e-3, 1e-6).is_err());
    }

    #[test]
    fn cosine_is_monotone_non_increasing() {
        let mut prev = f64::INFINITY;
        for step in 0..=777 {
            let lr = cosine_lr(step, 777, 2e-4, 1e-6).unwrap();
            assert!(lr <= prev + 1e-18, "increase at step {step}");
            prev = lr;
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut ps = ParamStore::new();
        let id = ps.add("p", {
            let mut a = zeros(&[1]);
            a[[0]] = -2.0;
            a
        });
        let mut opt = Optimizer::new(&ps, OptimConfig::adam());
        for _ in 0..400 {
            let p = ps.get(id)[[0]];
            let g = Arr::from_elem(IxDyn(&[1]), 2.0 * (p - 3.0));
            opt.step(&mut ps, &[Some(g)], 0.1);
        }
        assert!((ps.get(id)[[0]] - 3.0).abs() < 0.05);
        assert_eq!(opt.step_count(), 400);
    }

    #[test]
    fn adamw_decay_is_decoupled_from_moments() {
        let mut ps = ParamStore::new();
        let id = ps.add("p", Arr::from_elem(IxDyn(&[1]), 1.0));
        let mut opt = Optimizer::new(&ps, OptimConfig::adamw(0.01));
        // zero gradients: the Adam update term vanishes, only decay acts
        for _ in 0..10 {
            opt.step(&mut ps, &[Some(zeros(&[1]))], 0.5);
        }
        let expect = (1.0 - 0.5 * 0.01f64).powi(10);
        assert!((ps.get(id)[[0]] - expect).abs() < 1e-12);
    }

    #[test]
    fn skipped_gradient_leaves_parameter_untouched() {
        let mut ps = ParamStore::new();
        let id = ps.add("p", Arr::from_elem(IxDyn(&[2]), 5.0));
        let mut opt = Optimizer::new(&ps, OptimConfig::adamw(0.1));
        opt.step(&mut ps, &[None], 0.5);
        assert_eq!(ps.get(id)[[0]], 5.0);
    }

    #[test]
    fn restored_state_continues_identically() {
        let run = |resume_at: Option<usize>| {
            let mut ps = ParamStore::new();
            let id = ps.add("p", Arr::from_elem(IxDyn(&[1]), 4.0));
            let mut opt = Optimizer::new(&ps, OptimConfig::adam());
            for k in 0..20 {
                if Some(k) == resume_at {
                    let (m, v, s) = opt.state();
                    let (m, v) = (m.to_vec(), v.to_vec());
                    opt = Optimizer::restore(&ps, OptimConfig::adam(), m, v, s).unwrap();
                }
                let p = ps.get(id)[[0]];
                let g = Arr::from_elem(IxDyn(&[1]), p.sin());
                opt.step(&mut ps, &[Some(g)], 0.05);
            }
            ps.get(id)[[0]]
        };
        assert_eq!(run(None).to_bits(), run(Some(11)).to_bits());
    }

    #[test]
    fn restore_rejects_wrong_shapes() {
        let mut ps = ParamStore::new();
        ps.add("p", zeros(&[3]));
        let bad = Optimizer::restore(
            &ps,
            OptimConfig::adam(),
            vec![zeros(&[2])],
            vec![zeros(&[3])],
            0,
        );
        assert!(bad.is_err());
    }
}
