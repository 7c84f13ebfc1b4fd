use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Result, TensorError};

/// Adaptive moment estimation with bias correction and a constant
/// learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        let zeros = || {
            store
                .entries()
                .iter()
                .map(|e| vec![0.0; e.value.numel()])
                .collect::<Vec<_>>()
        };
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Restores a saved state. Moment buffers are matched to the store by
    /// position and must agree in size.
    pub fn from_state(
        store: &ParamStore,
        learning_rate: f64,
        step_count: u64,
        first: Vec<Vec<f64>>,
        second: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let fits = |m: &Vec<Vec<f64>>| {
            m.len() == store.len()
                && m.iter()
                    .zip(store.entries())
                    .all(|(b, e)| b.len() == e.value.numel())
        };
        if !fits(&first) || !fits(&second) {
            return Err(TensorError::InvalidArgument {
                op: "adam",
                reason: "moment buffers do not match the parameter store".into(),
            });
        }
        let mut adam = Self::new(store, learning_rate);
        adam.step_count = step_count;
        adam.first = first;
        adam.second = second;
        Ok(adam)
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }

    /// Applies one update to every trainable entry. Gradients are left in
    /// place; clear them with [`ParamStore::zero_grad`].
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(e) = store
            .entries()
            .iter()
            .find(|e| e.kind == ParamKind::Trainable && e.grad.is_none())
        {
            return Err(TensorError::MissingGrad(e.name.clone()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, e) in store.entries_mut().iter_mut().enumerate() {
            if e.kind != ParamKind::Trainable {
                continue;
            }
            let grad = e.grad.as_ref().expect("checked above").data();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, w) in e.value.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
