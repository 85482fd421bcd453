//! Trainable parameters and the Adam optimizer.

use crate::tensor::{Scalar, Tensor};

/// One trainable tensor with its gradient and Adam moment buffers.
#[derive(Clone, Debug)]
pub struct Parameter<T: Scalar = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
    pub step_count: u64,
}

impl<T: Scalar> Parameter<T> {
    fn new(name: String, value: Tensor<T>) -> Self {
        let shape = value.shape();
        Parameter {
            name,
            value,
            grad: Tensor::zeros(shape),
            adam_m: Tensor::zeros(shape),
            adam_v: Tensor::zeros(shape),
            step_count: 0,
        }
    }
}

/// Flat, name-addressable parameter set. Slots are stable for the lifetime
/// of the store, so models can hold plain indices.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar = f32> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.params.push(Parameter::new(name.into(), value));
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, slot: usize) -> &Tensor<T> {
        &self.params[slot].value
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut Tensor<T> {
        &mut self.params[slot].value
    }

    pub fn param(&self, slot: usize) -> &Parameter<T> {
        &self.params[slot]
    }

    pub fn param_mut(&mut self, slot: usize) -> &mut Parameter<T> {
        &mut self.params[slot]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn add_grad(&mut self, slot: usize, delta: &Tensor<T>) {
        for (g, d) in self.params[slot].grad.data_mut().iter_mut().zip(delta.data()) {
            *g += *d;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// One bias-corrected Adam update over every parameter in the store; grads
/// are zeroed afterwards.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, lr: T, beta1: T, beta2: T, eps: T) {
    for p in store.iter_mut() {
        p.step_count += 1;
        let t = p.step_count as i32;
        let bc1 = T::one() - beta1.powi(t);
        let bc2 = T::one() - beta2.powi(t);
        let value = p.value.data_mut();
        let grad = p.grad.data_mut();
        let m = p.adam_m.data_mut();
        let v = p.adam_v.data_mut();
        for i in 0..value.len() {
            let g = grad[i];
            m[i] = beta1 * m[i] + (T::one() - beta1) * g;
            v[i] = beta2 * v[i] + (T::one() - beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            grad[i] = T::zero();
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn scalar_store(grad: f64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let slot = store.add("p", Tensor::scalar(1.0));
        store.param_mut(slot).grad = Tensor::scalar(grad);
        store
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut store = scalar_store(0.0);
        adam_step(&mut store, 2e-4, ADAM_BETA1, ADAM_BETA2, ADAM_EPS);
        assert_eq!(store.value(0).data()[0], 1.0);
        assert_eq!(store.param(0).adam_m.data()[0], 0.0);
        assert_eq!(store.param(0).adam_v.data()[0], 0.0);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // Bias correction makes m_hat = v_hat = 1 at t = 1 for unit gradient,
        // so the update magnitude is lr / (1 + eps) ~ lr.
        let mut store = scalar_store(1.0);
        adam_step(&mut store, 2e-4, ADAM_BETA1, ADAM_BETA2, ADAM_EPS);
        let moved = 1.0 - store.value(0).data()[0];
        assert!((moved - 2e-4).abs() < 1e-9, "moved {moved}");
    }

    #[test]
    fn constant_gradient_converges_to_lr_times_sign() {
        let mut store = ParamStore::new();
        let slot = store.add("p", Tensor::scalar(0.0f64));
        let lr = 1e-3;
        let mut last_move = 0.0;
        for _ in 0..5000 {
            store.param_mut(slot).grad = Tensor::scalar(-3.0);
            let before = store.value(slot).data()[0];
            adam_step(&mut store, lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS);
            last_move = store.value(slot).data()[0] - before;
        }
        // Constant gradient g: m_hat -> g, v_hat -> g^2, update -> lr * sign(g).
        assert!((last_move - lr).abs() < 1e-6, "last move {last_move}");
    }

    #[test]
    fn grads_zeroed_after_step() {
        let mut store = ParamStore::new();
        let slot = store.add("p", Tensor::zeros(Shape::new(1, 2, 1, 1)));
        store.param_mut(slot).grad = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1.0, -1.0]).unwrap();
        adam_step(&mut store, 1e-3, ADAM_BETA1, ADAM_BETA2, ADAM_EPS);
        assert!(store.param(slot).grad.data().iter().all(|&g| g == 0.0));
    }
}
