//! Dimensional equilibrium modulator: a variance penalty on adapter factors.
//!
//! R = (1/n) * sum_i (Var(a_i) + Var(b_i)) over all n components, pruned
//! ones included, so restored components come back well-conditioned.
//! Entry-wise spread inside a factor is what lets a component hide a large
//! update in a few dimensions while keeping a small norm; penalizing it
//! keeps pruning decisions honest and the update stable.

use crate::error::{Error, Result};
use crate::numerics::{Node, Tape};

/// Regularization settings; eta = 0 disables the penalty exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizerConfig {
    pub eta: f64,
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.eta.is_finite() || self.eta < 0.0 {
            return Err(Error::Config(format!(
                "eta must be finite and >= 0, got {}",
                self.eta
            )));
        }
        Ok(())
    }
}

/// Mean over components of Var(a) + Var(b), as a differentiable scalar.
///
/// `factors` holds the already-bound (a, b) node pair of every component
/// across every site, active and pruned alike.
pub fn dem_loss(tape: &Tape, factors: &[(Node, Node)]) -> Result<Node> {
    if factors.is_empty() {
        return Err(Error::Contract(
            "dem_loss requires at least one component".into(),
        ));
    }
    let mut terms = Vec::with_capacity(factors.len() * 2);
    for (a, b) in factors {
        terms.push(a.variance());
        terms.push(b.variance());
    }
    let total = tape.sum_nodes(&terms)?;
    Ok(total.scale(1.0 / factors.len() as f64))
}

/// L_combined = L_true + eta * R, as a single differentiable scalar.
pub fn combined_loss(task_loss: &Node, reg: &Node, eta: f64) -> Result<Node> {
    if task_loss.shape() != (1, 1) {
        return Err(Error::Contract(format!(
            "combined_loss requires a scalar task loss, got {:?}",
            task_loss.shape()
        )));
    }
    task_loss.add(&reg.scale(eta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    #[test]
    fn constant_factors_have_zero_penalty() {
        let tape = Tape::new();
        let factors = vec![
            (
                tape.leaf(Matrix::filled(4, 1, 2.0), true),
                tape.leaf(Matrix::filled(1, 3, -1.0), true),
            ),
            (
                tape.leaf(Matrix::zeros(4, 1), true),
                tape.leaf(Matrix::filled(1, 3, 0.25), true),
            ),
        ];
        let r = dem_loss(&tape, &factors).unwrap();
        assert_eq!(r.item(), 0.0);
    }

    #[test]
    fn hand_case_single_component() {
        // a = [1, -1]^T has population variance 1; b = [0, 0] has 0.
        let tape = Tape::new();
        let factors = vec![(
            tape.leaf(Matrix::from_rows(&[vec![1.0], vec![-1.0]]), true),
            tape.leaf(Matrix::zeros(1, 2), true),
        )];
        let r = dem_loss(&tape, &factors).unwrap();
        assert_eq!(r.item(), 1.0);
    }

    #[test]
    fn empty_component_list_is_a_contract_error() {
        let tape = Tape::new();
        assert!(matches!(
            dem_loss(&tape, &[]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn eta_zero_combined_equals_task_loss_exactly() {
        let tape = Tape::new();
        let task = tape.leaf(Matrix::scalar(0.837_219), true);
        let factors = vec![(
            tape.leaf(Matrix::from_rows(&[vec![3.0], vec![-2.0]]), true),
            tape.leaf(Matrix::from_rows(&[vec![1.0, 5.0]]), true),
        )];
        let r = dem_loss(&tape, &factors).unwrap();
        assert!(r.item() > 0.0);
        let combined = combined_loss(&task, &r, 0.0).unwrap();
        assert_eq!(combined.item(), task.item());
    }

    #[test]
    fn combined_hand_arithmetic() {
        let tape = Tape::new();
        let task = tape.constant(Matrix::scalar(2.0));
        let r = tape.constant(Matrix::scalar(1.0));
        let combined = combined_loss(&task, &r, 0.3).unwrap();
        assert!((combined.item() - 2.3).abs() < 1e-15);
    }

    #[test]
    fn backward_reaches_both_task_inputs_and_factors() {
        let tape = Tape::new();
        let w = tape.leaf(Matrix::from_rows(&[vec![1.0, 2.0]]), true);
        let task = w.sum();
        let a = tape.leaf(Matrix::from_rows(&[vec![1.0], vec![3.0]]), true);
        let b = tape.leaf(Matrix::from_rows(&[vec![0.5, -0.5]]), true);
        let r = dem_loss(&tape, &[(a.clone(), b.clone())]).unwrap();
        let combined = combined_loss(&task, &r, 0.3).unwrap();
        tape.backward(&combined).unwrap();
        assert!(w.grad().max_abs() > 0.0);
        assert!(a.grad().max_abs() > 0.0);
        assert!(b.grad().max_abs() > 0.0);
    }

    #[test]
    fn penalty_is_permutation_invariant() {
        let tape = Tape::new();
        let a1 = tape.leaf(Matrix::from_rows(&[vec![1.0], vec![4.0], vec![2.0]]), true);
        let a2 = tape.leaf(Matrix::from_rows(&[vec![2.0], vec![1.0], vec![4.0]]), true);
        let b = tape.leaf(Matrix::zeros(1, 2), true);
        let r1 = dem_loss(&tape, &[(a1, b.clone())]).unwrap();
        let r2 = dem_loss(&tape, &[(a2, b)]).unwrap();
        assert_eq!(r1.item(), r2.item());
    }

    #[test]
    fn gradient_steps_on_penalty_alone_strictly_decrease_it() {
        let mut a = Matrix::from_rows(&[vec![2.0], vec![-1.0], vec![0.5]]);
        let mut b = Matrix::from_rows(&[vec![1.0, 3.0]]);
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let tape = Tape::new();
            let an = tape.leaf(a.clone(), true);
            let bn = tape.leaf(b.clone(), true);
            let r = dem_loss(&tape, &[(an.clone(), bn.clone())]).unwrap();
            let value = r.item();
            assert!(value < prev, "{value} !< {prev}");
            prev = value;
            tape.backward(&r).unwrap();
            a.scaled_add_assign(-0.1, &an.grad());
            b.scaled_add_assign(-0.1, &bn.grad());
        }
        assert!(prev < 1e-2);
    }
}
