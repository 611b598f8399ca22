use crate::{Float, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam with decoupled weight decay.
///
/// Parameters whose gradient is `None` are skipped entirely (no decay, no
/// moment update), matching the usual framework convention.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Float> AdamW<F> {
    pub fn new<P: Float>(config: AdamWConfig, params: &ParamStore<P>) -> Self {
        let m = params.iter().map(|(_, _, a)| vec![F::zero(); a.len()]).collect();
        let v = params.iter().map(|(_, _, a)| vec![F::zero(); a.len()]).collect();
        Self { config, step: 0, m, v }
    }

    /// Rebuilds an optimizer from saved moments.
    pub fn from_state(config: AdamWConfig, step: u64, m: Vec<Vec<F>>, v: Vec<Vec<F>>) -> Self {
        assert_eq!(m.len(), v.len());
        Self { config, step, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<F>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<F>] {
        &self.v
    }

    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &[Option<Vec<F>>]) {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let (one_b1, one_b2) = (F::lit(1.0 - c.beta1), F::lit(1.0 - c.beta2));
        let step_size = F::lit(c.lr / bc1);
        let inv_sqrt_bc2 = F::lit(1.0 / bc2.sqrt());
        let eps = F::lit(c.eps);
        let decay = F::lit(1.0 - c.lr * c.weight_decay);
        for (id, grad) in params.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            let Some(grad) = grad else { continue };
            let p = params.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for i in 0..p.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                p[i] = p[i] * decay - step_size * m[i] / (v[i].sqrt() * inv_sqrt_bc2 + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Array;

    fn store() -> ParamStore<f64> {
        let mut ps = ParamStore::new();
        ps.add("a.w", Array::new([3], vec![1.0, -2.0, 0.5]));
        ps
    }

    #[test]
    fn zero_gradient_without_decay_leaves_parameters() {
        let mut ps = store();
        let before = ps.get(ps.id("a.w").unwrap()).clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &ps);
        opt.step(&mut ps, &[Some(vec![0.0; 3])]);
        assert_eq!(ps.get(ps.id("a.w").unwrap()), &before);
    }

    #[test]
    fn zero_gradient_with_decay_only_shrinks() {
        let mut ps = store();
        let cfg = AdamWConfig { weight_decay: 0.1, ..Default::default() };
        let mut opt = AdamW::new(cfg, &ps);
        opt.step(&mut ps, &[Some(vec![0.0; 3])]);
        let k = 1.0 - 1e-3 * 0.1;
        assert_eq!(ps.get(ps.id("a.w").unwrap()).data(), &[k, -2.0 * k, 0.5 * k]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first Adam step is lr * sign(g) (up to eps).
        let mut ps = store();
        let mut opt = AdamW::new(AdamWConfig::default(), &ps);
        opt.step(&mut ps, &[Some(vec![3.0, -0.2, 1e-3])]);
        let p = ps.get(ps.id("a.w").unwrap()).data();
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[1] - (-2.0 + 1e-3)).abs() < 1e-9);
        assert!((p[2] - (0.5 - 1e-3)).abs() < 1e-7);
    }
}
