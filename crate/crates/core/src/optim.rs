use crate::autodiff::{Grads, ParamStore};
use crate::scalar::Scalar;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(learning_rate: f64) -> Self {
        Adam { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// One update; parameters without a gradient keep their moments.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>) {
        let tensors = params.tensors_mut();
        if self.m.is_empty() {
            self.m = tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let one = T::one();
        let c1 = one - b1.powi(self.step);
        let c2 = one - b2.powi(self.step);
        let lr = T::lit(self.learning_rate);
        let eps = T::lit(self.eps);
        for (k, tensor) in tensors.iter_mut().enumerate() {
            let Some(Some(g)) = grads.get(k) else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..tensor.data.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                tensor.data[i] = tensor.data[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::from_vec(1, 2, vec![1.0, -1.0]));
        let grads = vec![Some(Tensor::from_vec(1, 2, vec![0.5, -3.0]))];
        let mut adam = Adam::new(0.1);
        adam.step(&mut store, &grads);
        let w = &store.get(store.id("w").unwrap()).data;
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("x", Tensor::from_vec(1, 1, vec![3.0]));
        let mut adam = Adam::new(0.05);
        for _ in 0..2000 {
            let x = store.get(id).data[0];
            adam.step(&mut store, &vec![Some(Tensor::from_vec(1, 1, vec![2.0 * (x - 1.0)]))]);
        }
        assert!((store.get(id).data[0] - 1.0).abs() < 1e-3);
    }
}
