//! AdamW with decoupled weight decay and named learning-rate groups.

use crate::error::{Result, TensorError};
use crate::param::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Parameters sharing one base learning rate.
#[derive(Clone, Debug)]
pub struct ParamGroup {
    pub name: String,
    pub lr: f64,
    pub params: Vec<ParamId>,
}

/// Per-parameter moments, indexed like the owning [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamWState<T: Real = f32> {
    pub first_moment: Vec<Option<Tensor<T>>>,
    pub second_moment: Vec<Option<Tensor<T>>>,
    pub step: u64,
}

impl<T: Real> AdamWState<T> {
    pub fn new(num_params: usize) -> Self {
        Self {
            first_moment: vec![None; num_params],
            second_moment: vec![None; num_params],
            step: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T: Real = f32> {
    config: AdamWConfig,
    groups: Vec<ParamGroup>,
    state: AdamWState<T>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, groups: Vec<ParamGroup>, store: &ParamStore<T>) -> Self {
        Self {
            config,
            groups,
            state: AdamWState::new(store.len()),
        }
    }

    /// One group holding every non-frozen parameter of `store`.
    pub fn single_group(config: AdamWConfig, store: &ParamStore<T>, lr: f64) -> Self {
        let params = store
            .iter()
            .filter(|(_, p)| !p.is_frozen())
            .map(|(id, _)| id)
            .collect();
        Self::new(
            config,
            vec![ParamGroup {
                name: "all".into(),
                lr,
                params,
            }],
            store,
        )
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group_lr(&self, name: &str) -> Option<f64> {
        self.groups.iter().find(|g| g.name == name).map(|g| g.lr)
    }

    pub fn state(&self) -> &AdamWState<T> {
        &self.state
    }

    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    /// Applies one update with each group's base lr multiplied by `lr_factor`.
    ///
    /// Any non-finite gradient aborts the step before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr_factor: f64) -> Result<()> {
        for group in &self.groups {
            for &id in &group.params {
                let p = store.get(id);
                if let Some((index, &value)) =
                    p.grad().data().iter().enumerate().find(|(_, g)| !g.is_finite())
                {
                    return Err(TensorError::NonFiniteGradient {
                        name: p.name().to_string(),
                        index,
                        value: value.as_f64(),
                    });
                }
            }
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let eps = T::from_f64(c.eps);
        let wd = T::from_f64(c.weight_decay);
        let inv_bc1 = T::from_f64(1.0 / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        for group in &self.groups {
            let lr = T::from_f64(group.lr * lr_factor);
            for &id in &group.params {
                let i = id.index();
                let shape = store.get(id).value().shape().to_vec();
                let m = self.state.first_moment[i].get_or_insert_with(|| Tensor::zeros(shape.clone()));
                let v = self.state.second_moment[i].get_or_insert_with(|| Tensor::zeros(shape));
                let p = store.get_mut(id);
                let grad = p.grad().data().to_vec();
                let value = p.value_mut();
                for (((w, &g), m), v) in value
                    .iter_mut()
                    .zip(&grad)
                    .zip(m.data_mut().iter_mut())
                    .zip(v.data_mut().iter_mut())
                {
                    *m = b1 * *m + one_b1 * g;
                    *v = b2 * *v + one_b2 * g * g;
                    let m_hat = *m * inv_bc1;
                    let v_hat = *v * inv_bc2;
                    *w = *w - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *w);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn scalar_store(value: f64, grad: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::new(vec![1], vec![value]).unwrap()).unwrap();
        if grad != 0.0 {
            let mut g = Graph::new();
            let p = g.param(&store, id);
            let s = g.scale(p, grad);
            let l = g.sum(s);
            g.backward(l).unwrap().accumulate_into(&mut store);
        }
        (store, id)
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let (mut store, id) = scalar_store(0.7, 0.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::single_group(cfg, &store, 0.1);
        opt.step(&mut store, 1.0).unwrap();
        assert_eq!(store.get(id).value().data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g = 1 and v_hat = g^2 = 1 after bias correction
        let (mut store, id) = scalar_store(0.0, 1.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::single_group(cfg, &store, 0.1);
        opt.step(&mut store, 1.0).unwrap();
        let p = store.get(id).value().data()[0];
        assert!((p + 0.1).abs() < 1e-8, "{p}");
    }

    #[test]
    fn decay_only_shrinks() {
        let (mut store, id) = scalar_store(2.0, 0.0);
        let cfg = AdamWConfig {
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut opt = AdamW::single_group(cfg, &store, 0.1);
        opt.step(&mut store, 1.0).unwrap();
        let p = store.get(id).value().data()[0];
        assert!((p - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-12, "{p}");
    }

    #[test]
    fn zero_lr_is_identity() {
        let (mut store, id) = scalar_store(1.5, 3.0);
        let mut opt = AdamW::single_group(AdamWConfig::default(), &store, 0.0);
        for _ in 0..3 {
            opt.step(&mut store, 1.0).unwrap();
        }
        assert_eq!(store.get(id).value().data(), &[1.5]);
        assert_eq!(opt.step_count(), 3);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap()).unwrap();
        store.accumulate_grad(id, &Tensor::new(vec![2], vec![0.0, f64::NAN]).unwrap());
        let mut opt = AdamW::single_group(AdamWConfig::default(), &store, 0.1);
        let err = opt.step(&mut store, 1.0).unwrap_err();
        assert!(matches!(err, TensorError::NonFiniteGradient { index: 1, .. }));
        assert_eq!(store.get(id).value().data(), &[1.0, 1.0]);
        assert_eq!(opt.step_count(), 0);
    }
}
