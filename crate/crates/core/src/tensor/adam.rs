use super::{ParamId, ParameterStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

/// Adam optimiser state: first and second moments per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. Parameters absent from `grads` are left alone.
    /// Returns the global gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParameterStore, mut grads: Vec<(ParamId, Tensor)>) -> f64 {
        let norm = grads.iter().map(|(_, g)| g.norm_sq()).sum::<f64>().sqrt();
        if let Some(max) = self.config.clip_norm {
            if norm > max && norm.is_finite() {
                let s = max / norm;
                for (_, g) in &mut grads {
                    g.scale_assign(s);
                }
            }
        }
        self.t += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (id, g) in grads {
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| {
                let z = g.map(|_| 0.0);
                (z.clone(), z)
            });
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = &mut m.data_mut()[i];
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = m.data()[i] / c1;
                let vhat = v.data()[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        norm
    }
}

/// Free-function form of [`Adam::step`].
pub fn adam_step(store: &mut ParameterStore, opt: &mut Adam, grads: Vec<(ParamId, Tensor)>) -> f64 {
    opt.step(store, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (ParameterStore, ParamId, ParamId) {
        let mut s = ParameterStore::new(1);
        let a = s.insert("a", Tensor::row(vec![1.0, -2.0])).unwrap();
        let b = s.insert("b", Tensor::row(vec![3.0])).unwrap();
        (s, a, b)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut s, a, _) = store();
        let before = s.clone();
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut s, vec![(a, Tensor::row(vec![0.0, 0.0]))]);
        assert_eq!(s, before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let (mut s, a, b) = store();
        let mut opt = Adam::new(AdamConfig {
            clip_norm: None,
            ..AdamConfig::default()
        });
        opt.step(&mut s, vec![(a, Tensor::row(vec![0.5, -3.0]))]);
        let p = s.get(a).data();
        assert!((p[0] - (1.0 - 0.01)).abs() < 1e-9);
        assert!((p[1] - (-2.0 + 0.01)).abs() < 1e-9);
        assert_eq!(s.get(b).data(), &[3.0]);
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let (mut s, a, _) = store();
        let mut opt = Adam::new(AdamConfig::default());
        let n = opt.step(&mut s, vec![(a, Tensor::row(vec![30.0, 40.0]))]);
        assert_eq!(n, 50.0);
    }
}
