use super::{DenseTensor, Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Bias-corrected Adam over a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<DenseTensor>,
    v: Vec<DenseTensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<DenseTensor> = store
            .ids()
            .map(|id| {
                let (r, c) = store.get(id).shape();
                DenseTensor::zeros(r, c)
            })
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn with_defaults(store: &ParamStore) -> Self {
        Self::new(store, 0.001)
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn second_moment(&self, id: ParamId) -> &DenseTensor {
        &self.v[id.0]
    }

    /// One update of every parameter for which `trainable` holds.
    ///
    /// Frozen parameters keep their values and moments untouched. All
    /// gradients are checked for finiteness before anything is written.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        trainable: impl Fn(ParamId) -> bool,
    ) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Config(format!(
                "adam: {} gradients / {} moments for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        for (id, g) in grads.iter() {
            if g.shape() != store.get(id).shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: store.get(id).shape(),
                    right: g.shape(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient {
                    param: store.name(id).to_string(),
                });
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads.iter() {
            if !trainable(id) {
                continue;
            }
            let m = self.m[id.0].values_mut();
            let v = self.v[id.0].values_mut();
            let w = store.get_mut(id).values_mut();
            for i in 0..w.len() {
                let gi = g.values()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn scalar_store(w: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("w", DenseTensor::scalar(w)).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let (mut s, id) = scalar_store(0.7);
        let mut adam = AdamState::with_defaults(&s);
        let g = Gradients::zeros_like(&s);
        for _ in 0..5 {
            adam.step(&mut s, &g, |_| true).unwrap();
        }
        assert_eq!(s.get(id).values()[0], 0.7);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = scalar_store(1.0);
        let mut adam = AdamState::with_defaults(&s);
        let mut tape = Tape::new();
        let w = tape.param(&s, id);
        let loss = tape.sum_all(w);
        let g = tape.backward(loss, &s).unwrap();
        adam.step(&mut s, &g, |_| true).unwrap();
        // m_hat = 1, v_hat = 1  =>  Δ = lr / (1 + eps)
        let expected = 1.0 - 0.001 / (1.0 + 1e-8);
        assert!((s.get(id).values()[0] - expected).abs() < 1e-15);
        assert!((s.get(id).values()[0] - 0.999).abs() < 1e-10);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut s, _) = scalar_store(1.0);
        s.insert("bad.param", DenseTensor::scalar(0.0)).unwrap();
        let mut adam = AdamState::with_defaults(&s);
        let mut tape = Tape::new();
        let id = s.id("bad.param").unwrap();
        let p = tape.param(&s, id);
        let l = tape.scale(p, f64::NAN);
        let g = tape.backward(l, &s).unwrap();
        let err = adam.step(&mut s, &g, |_| true).unwrap_err().to_string();
        assert!(err.contains("bad.param"), "{err}");
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn frozen_parameters_untouched() {
        let (mut s, id) = scalar_store(1.0);
        let mut adam = AdamState::with_defaults(&s);
        let mut tape = Tape::new();
        let w = tape.param(&s, id);
        let loss = tape.sum_all(w);
        let g = tape.backward(loss, &s).unwrap();
        adam.step(&mut s, &g, |_| false).unwrap();
        assert_eq!(s.get(id).values()[0], 1.0);
        assert!(adam.second_moment(id).values().iter().all(|&v| v == 0.0));
    }
}
