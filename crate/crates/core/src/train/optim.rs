use crate::error::{Error, Result};
use crate::params::ParamStore;

/// AdamW hyperparameters; the learning rate is supplied per step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moment estimates plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub m: ParamStore,
    pub v: ParamStore,
    pub t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ParamStore) -> Self {
        AdamW {
            cfg,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// One update with decoupled weight decay: `p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
        if !params.same_layout(grads) || !params.same_layout(&self.m) {
            return Err(Error::Shape("optimizer state does not match the parameters".into()));
        }
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let shrink = 1.0 - lr * weight_decay;
        for (((name, p), (_, m)), (_, v)) in params.iter_mut().zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            let g = grads.get(name).expect("same layout");
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                p[i] *= shrink;
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn cfg(wd: f64) -> AdamWConfig {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    fn single(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::scalar(x)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_only_shrinks() {
        let mut p = single(2.0);
        let mut opt = AdamW::new(cfg(0.1), &p);
        let zero = p.zeros_like();
        for k in 1..=5 {
            opt.step(&mut p, &zero, 0.5).unwrap();
            let want = 2.0 * 0.95f64.powi(k);
            assert!((p.get("x").unwrap().data()[0] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_matches_scalar_oracle() {
        // f(x) = (x - 3)^2 with a hand-rolled scalar optimizer alongside.
        let (lr, wd) = (0.1, 0.01);
        let mut p = single(-1.0);
        let mut opt = AdamW::new(cfg(wd), &p);
        let (mut x, mut m, mut v) = (-1.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = 2.0 * (x - 3.0);
            let grads = single(g);
            opt.step(&mut p, &grads, lr).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x = x * (1.0 - lr * wd) - lr * mh / (vh.sqrt() + 1e-8);
            assert!((p.get("x").unwrap().data()[0] - x).abs() < 1e-6);
        }
        assert!((x - 3.0).abs() < 0.5);
    }
}
