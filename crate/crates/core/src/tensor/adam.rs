use indexmap::IndexMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Adam with bias correction. Moments are keyed by parameter name and
/// created lazily (zero-initialised) on the first step that sees a name.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    t: u64,
    states: IndexMap<String, AdamState<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            t: 0,
            states: IndexMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn state(&self, name: &str) -> Option<&AdamState<T>> {
        self.states.get(name)
    }

    /// One update over `(name, parameter, gradient)` triples. Fails with
    /// `MissingGrad` before touching anything if any gradient is absent.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor<T>, Option<&'a [T]>)>,
    {
        let mut items = Vec::new();
        for (name, p, g) in params {
            let g = g.ok_or_else(|| Error::MissingGrad(name.to_string()))?;
            if g.len() != p.len() {
                return Err(Error::shape("adam_step", p.shape(), &[g.len()]));
            }
            items.push((name, p, g));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (T::cst(c.beta1), T::cst(c.beta2));
        let (one_b1, one_b2) = (T::cst(1.0 - c.beta1), T::cst(1.0 - c.beta2));
        let (bc1, bc2) = (T::cst(bc1), T::cst(bc2));
        let (lr, eps) = (T::cst(c.lr), T::cst(c.eps));

        for (name, p, g) in items {
            let st = self.states.entry(name.to_string()).or_insert_with(|| AdamState {
                m: vec![T::zero(); g.len()],
                v: vec![T::zero(); g.len()],
            });
            for (((w, &gi), m), v) in p.data_mut().iter_mut().zip(g).zip(&mut st.m).zip(&mut st.v) {
                *m = b1 * *m + one_b1 * gi;
                *v = b2 * *v + one_b2 * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut adam = Adam::<f64>::new(AdamConfig::default());
        let mut w = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = w.clone();
        let g = [0.0; 3];
        for _ in 0..5 {
            adam.step([("w", &mut w, Some(&g[..]))]).unwrap();
        }
        assert_eq!(w, before);
    }

    #[test]
    fn first_step_scalar_trace() {
        // m = 0.1, v = 0.001, m̂ = 1, v̂ = 1 → w = 1 − 0.001 / (1 + 1e-8)
        let mut adam = Adam::<f64>::new(AdamConfig::default());
        let mut w = Tensor::scalar(1.0);
        adam.step([("w", &mut w, Some(&[1.0][..]))]).unwrap();
        let expected = 1.0 - 0.001 / (1.0 + 1e-8);
        assert!((w.data()[0] - expected).abs() < 1e-15);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn defaults_match_training_setup() {
        let c = AdamConfig::default();
        assert_eq!(c.lr, 0.001);
        assert_eq!((c.beta1, c.beta2, c.eps), (0.9, 0.999, 1e-8));
    }

    #[test]
    fn missing_grad_is_an_error_and_mutates_nothing() {
        let mut adam = Adam::<f32>::new(AdamConfig::default());
        let mut a = Tensor::scalar(1.0f32);
        let mut b = Tensor::scalar(1.0f32);
        let err = adam
            .step([("a", &mut a, Some(&[1.0f32][..])), ("b", &mut b, None)])
            .unwrap_err();
        assert!(matches!(err, Error::MissingGrad(ref n) if n == "b"));
        assert_eq!(a.data()[0], 1.0);
        assert_eq!(adam.steps(), 0);
    }
}
