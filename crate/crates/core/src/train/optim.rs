use crate::error::{Error, Result};
use crate::tensor::ParamRegistry;

/// Adam with bias correction; frozen entries are never touched.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![None; params],
            v: vec![None; params],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`. `grads` is indexed like the
    /// registry; `None` counts as a zero gradient.
    pub fn step(&mut self, reg: &mut ParamRegistry, grads: &[Option<Vec<f64>>], lr: f64) -> Result<()> {
        if grads.len() != reg.len() || self.m.len() != reg.len() {
            return Err(Error::contract(
                "adam_step",
                format!("{} grads and {} moment slots for {} params", grads.len(), self.m.len(), reg.len()),
            ));
        }
        for id in reg.ids() {
            let n = reg.tensor(id).numel();
            let bad = |what: &str, len: usize| {
                Error::contract("adam_step", format!("{what} for {} has {len} values, param has {n}", reg.entry(id).name))
            };
            if let Some(g) = &grads[id.index()] {
                if g.len() != n {
                    return Err(bad("gradient", g.len()));
                }
            }
            for slot in [&self.m[id.index()], &self.v[id.index()]].into_iter().flatten() {
                if slot.len() != n {
                    return Err(bad("moment", slot.len()));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = reg.trainable().collect();
        for id in ids {
            let i = id.index();
            let n = reg.tensor(id).numel();
            let m = self.m[i].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[i].get_or_insert_with(|| vec![0.0; n]);
            let g = grads[i].as_deref();
            let w = reg.tensor_mut(id).data_mut();
            for k in 0..n {
                let gk = g.map_or(0.0, |g| g[k]);
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                w[k] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Step decay by `gamma` at each milestone episode.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiStepLr {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl MultiStepLr {
    pub fn at(&self, episode: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= episode).count();
        self.base * self.gamma.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamGroup, TokenTensor};

    fn registry() -> ParamRegistry {
        let mut r = ParamRegistry::new();
        r.register("w", ParamGroup::Adapter, TokenTensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), false)
            .unwrap();
        r.register("f", ParamGroup::Backbone, TokenTensor::new(vec![2], vec![4.0, 5.0]).unwrap(), true)
            .unwrap();
        r
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut r = registry();
        let before: Vec<Vec<f64>> = r.entries().iter().map(|e| e.tensor.data().to_vec()).collect();
        let mut a = Adam::new(r.len());
        a.step(&mut r, &[Some(vec![0.0; 3]), None], 0.1).unwrap();
        let after: Vec<Vec<f64>> = r.entries().iter().map(|e| e.tensor.data().to_vec()).collect();
        assert_eq!(after, before);
    }

    #[test]
    fn first_step_closed_form() {
        let mut r = registry();
        let mut a = Adam::new(r.len());
        let g = [0.3, -4.0, 1e-3];
        a.step(&mut r, &[Some(g.to_vec()), None], 0.01).unwrap();
        let w0 = [1.0, -2.0, 0.5];
        for k in 0..3 {
            let want = w0[k] - 0.01 * g[k] / (g[k].abs() + 1e-8);
            assert!((r.tensor(r.id("w").unwrap()).data()[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_params_ignore_spurious_grads() {
        let mut r = registry();
        let mut a = Adam::new(r.len());
        a.step(&mut r, &[None, Some(vec![9.0, 9.0])], 0.1).unwrap();
        assert_eq!(r.tensor(r.id("f").unwrap()).data(), &[4.0, 5.0]);
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let mut r = registry();
        let mut a = Adam::new(r.len());
        assert!(matches!(a.step(&mut r, &[Some(vec![1.0; 2]), None], 0.1), Err(Error::Contract { .. })));
        assert!(matches!(a.step(&mut r, &[None], 0.1), Err(Error::Contract { .. })));
        assert!(matches!(Adam::new(5).step(&mut r, &[None, None], 0.1), Err(Error::Contract { .. })));
    }

    #[test]
    fn schedule_is_piecewise_constant() {
        let s = MultiStepLr { base: 1.0, milestones: vec![3, 5], gamma: 0.5 };
        let lrs: Vec<f64> = (0..7).map(|e| s.at(e)).collect();
        assert_eq!(lrs, vec![1.0, 1.0, 1.0, 0.5, 0.5, 0.25, 0.25]);
    }
}
