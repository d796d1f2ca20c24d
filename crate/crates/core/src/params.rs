//! Trainable tensors with their optimizer slots.

use crate::numerics::Matrix;

/// A tensor plus gradient accumulator and Adam moments.
///
/// Whether a `Param` actually trains is decided by the caller each step;
/// frozen tensors are simply never stepped, which keeps them bitwise
/// unchanged for the lifetime of a run.
#[derive(Clone)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
    m: Matrix,
    v: Matrix,
    steps: u64,
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let (r, c) = value.shape();
        Param {
            value,
            grad: Matrix::zeros(r, c),
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
            steps: 0,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Plain gradient descent: value -= gamma * grad.
    pub fn sgd_step(&mut self, gamma: f64) {
        self.value.scaled_add_assign(-gamma, &self.grad.clone());
    }

    /// Adam update with bias correction.
    pub fn adam_step(&mut self, gamma: f64, beta1: f64, beta2: f64, eps: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for i in 0..self.value.len() {
            let g = self.grad.data()[i];
            let m = beta1 * self.m.data()[i] + (1.0 - beta1) * g;
            let v = beta2 * self.v.data()[i] + (1.0 - beta2) * g * g;
            self.m.data_mut()[i] = m;
            self.v.data_mut()[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            self.value.data_mut()[i] -= gamma * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step_is_definitional() {
        let mut p = Param::new(Matrix::from_rows(&[vec![1.0, 2.0]]));
        p.grad = Matrix::from_rows(&[vec![10.0, -10.0]]);
        p.sgd_step(0.1);
        assert_eq!(p.value, Matrix::from_rows(&[vec![0.0, 3.0]]));
    }

    #[test]
    fn zero_gradient_leaves_value_unchanged() {
        let before = Matrix::from_rows(&[vec![0.5, -0.25]]);
        let mut p = Param::new(before.clone());
        p.sgd_step(0.1);
        p.adam_step(0.1, 0.9, 0.999, 1e-8);
        assert_eq!(p.value, before);
    }

    #[test]
    fn adam_first_step_moves_by_roughly_gamma() {
        let mut p = Param::new(Matrix::scalar(0.0));
        p.grad = Matrix::scalar(1e-3);
        p.adam_step(0.01, 0.9, 0.999, 1e-8);
        // With bias correction the first step is close to -gamma * sign(g).
        assert!((p.value.item() + 0.01).abs() < 1e-4, "{}", p.value.item());
    }
}
