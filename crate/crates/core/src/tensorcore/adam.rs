use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{bail, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: AdamConfig, params: &ParamStore<S>) -> Result<Self> {
        if !(cfg.lr > 0.0) {
            bail!(Config, "learning rate must be positive, got {}", cfg.lr);
        }
        if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) || !(cfg.eps > 0.0) {
            bail!(Config, "invalid Adam betas/eps {:?}", cfg);
        }
        let zeros = || params.tensors().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Ok(Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &[Tensor<S>]) -> Result<()> {
        if grads.len() != self.m.len() {
            bail!(Dimension, "{} gradients for {} parameters", grads.len(), self.m.len());
        }
        for ((p, g), m) in params.tensors().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                bail!(Dimension, "gradient shape {:?} vs parameter {:?}", g.shape(), p.shape());
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (S::of(self.cfg.beta1), S::of(self.cfg.beta2));
        let c1 = S::one() - b1.powi(t);
        let c2 = S::one() - b2.powi(t);
        let lr = S::of(self.cfg.lr);
        let eps = S::of(self.cfg.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (S::one() - b1) * gv;
                *vv = b2 * *vv + (S::one() - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// One Adam update of `params` in place.
pub fn adam_step<S: Scalar>(params: &mut ParamStore<S>, grads: &[Tensor<S>], state: &mut Adam<S>) -> Result<()> {
    state.step(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn scalar_store(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(w));
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = scalar_store(0.7);
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &p).unwrap();
        for _ in 0..10 {
            adam_step(&mut p, &[Tensor::scalar(0.0)], &mut opt).unwrap();
        }
        assert_eq!(p.tensors().next().unwrap().data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_store(0.0);
        let mut opt = Adam::new(AdamConfig::with_lr(0.01), &p).unwrap();
        opt.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        let w = p.tensors().next().unwrap().data()[0];
        assert!((w + 0.01).abs() < 1e-9, "{w}");
    }

    #[test]
    fn quadratic_converges() {
        // Oracle: plain scalar simulation of Adam on f(w) = w^2.
        let mut p = scalar_store(1.0);
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &p).unwrap();
        for _ in 0..100 {
            let w = p.tensors().next().unwrap().data()[0];
            opt.step(&mut p, &[Tensor::scalar(2.0 * w)]).unwrap();
        }
        let w = p.tensors().next().unwrap().data()[0];

        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = 2.0 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((w - x).abs() < 1e-12);
        assert!(w.abs() < 0.1, "{w}");
    }

    #[test]
    fn non_positive_lr_is_rejected() {
        let p = scalar_store(0.0);
        assert!(matches!(Adam::new(AdamConfig::with_lr(0.0), &p), Err(Error::Config(_))));
        assert!(matches!(Adam::new(AdamConfig::with_lr(-1.0), &p), Err(Error::Config(_))));
    }
}
