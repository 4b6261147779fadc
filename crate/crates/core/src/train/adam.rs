use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Float;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam with bias-corrected moments. One moment pair per trainable entry of
/// the store it was created for, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps taken so far.
    pub t: u64,
    /// `(entry name, m, v)`
    pub moments: Vec<(String, Vec<T>, Vec<T>)>,
}

impl<T: Float> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let moments = store
            .trainable()
            .map(|(_, e)| (e.name.clone(), vec![T::zero(); e.value.numel()], vec![T::zero(); e.value.numel()]))
            .collect();
        Self { beta1: BETA1, beta2: BETA2, eps: EPSILON, t: 0, moments }
    }

    /// Applies the accumulated gradients in `store`. A non-finite gradient
    /// aborts before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        let trainable: Vec<_> = store.trainable().map(|(id, _)| id).collect();
        if trainable.len() != self.moments.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} tensors, store has {}",
                self.moments.len(),
                trainable.len()
            )));
        }
        for (&id, (name, m, _)) in trainable.iter().zip(&self.moments) {
            let e = store.entry(id);
            if e.name != *name || e.grad.len() != m.len() {
                return Err(Error::State(format!("optimizer state for {name} does not match {}", e.name)));
            }
            if let Some(bad) = e.grad.iter().find(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name} is {bad:?}; training aborted")));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (b1t, b2t) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
        let (ob1, ob2) = (T::from_f64_lossy(1.0 - b1), T::from_f64_lossy(1.0 - b2));
        let step = T::from_f64_lossy(lr / c1);
        let inv_c2 = T::from_f64_lossy(1.0 / c2);
        let eps = T::from_f64_lossy(self.eps);
        for (&id, (_, m, v)) in trainable.iter().zip(&mut self.moments) {
            let e = store.entry_mut(id);
            let (value, grad) = (e.value.data_mut(), &e.grad);
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1t * m[i] + ob1 * g;
                v[i] = b2t * v[i] + ob2 * g * g;
                value[i] -= step * m[i] / ((v[i] * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
