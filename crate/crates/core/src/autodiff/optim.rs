use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

pub trait Optimizer<T: Scalar> {
    /// Applies one update. Fails without touching any parameter if a gradient
    /// is not finite.
    fn step(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>], lr: f64) -> Result<()>;
}

fn check_grads<T: Scalar>(store: &ParamStore<T>, grads: &[Vec<T>]) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::mismatch(format!("{} gradients", store.len()), grads.len()));
    }
    for (entry, g) in store.entries().iter().zip(grads) {
        if g.len() != entry.value.len() {
            return Err(Error::mismatch(
                format!("{} gradient values for `{}`", entry.value.len(), entry.name),
                g.len(),
            ));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(entry.name.clone()));
        }
    }
    Ok(())
}

/// SGD with classical momentum: `v = mu * v + g; p -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64) -> Self {
        Self { momentum, velocity: Vec::new() }
    }
}

impl<T: Scalar> Optimizer<T> for Sgd<T> {
    fn step(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>], lr: f64) -> Result<()> {
        check_grads(store, grads)?;
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
        }
        let (mu, lr) = (T::of(self.momentum), T::of(lr));
        for ((entry, g), vel) in store.entries_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((p, &gi), v) in entry.value.data_mut().iter_mut().zip(g).zip(vel.iter_mut()) {
                *v = mu * *v + gi;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl<T: Scalar> Adam<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> i32 {
        self.t
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn step(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>], lr: f64) -> Result<()> {
        check_grads(store, grads)?;
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one, eps) = (T::one(), T::of(self.eps));
        let c1 = T::of(1.0 - self.beta1.powi(self.t));
        let c2 = T::of(1.0 - self.beta2.powi(self.t));
        let lr = T::of(lr);
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in entry.value.data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        s
    }

    #[test]
    fn sgd_first_step() {
        let mut s = store();
        Sgd::new(0.9).step(&mut s, &[vec![1.0; 3]], 0.1).unwrap();
        let expect = [0.9, -2.1, 0.4];
        for (a, b) in s.entries()[0].value.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gradients_leave_params() {
        for opt in [&mut Sgd::new(0.0) as &mut dyn Optimizer<f64>, &mut Adam::new()] {
            let mut s = store();
            opt.step(&mut s, &[vec![0.0; 3]], 0.1).unwrap();
            assert_eq!(s, store());
        }
    }

    #[test]
    fn adam_first_step_is_sign_times_lr() {
        let mut s = store();
        let g = vec![0.3, -4.0, 1e-3];
        Adam::new().step(&mut s, &[g.clone()], 0.01).unwrap();
        for ((after, before), gi) in s.entries()[0].value.data().iter().zip(store().entries()[0].value.data()).zip(g) {
            let update = before - after;
            assert!((update - 0.01 * gi.signum()).abs() < 1e-6, "{update}");
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = store();
        let err = Adam::new().step(&mut s, &[vec![0.0, f64::NAN, 0.0]], 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "p"));
        assert_eq!(s, store());
    }
}
