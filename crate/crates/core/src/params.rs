//! Registration of model parameters on a tape.

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

/// A fixed, ordered collection of parameter tensors.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Bitwise snapshot, for frozen-weight checks.
    fn snapshot(&self) -> Vec<Tensor> {
        self.tensors().into_iter().cloned().collect()
    }

    fn bitwise_eq_snapshot(&self, snapshot: &[Tensor]) -> bool {
        let ts = self.tensors();
        ts.len() == snapshot.len() && ts.iter().zip(snapshot).all(|(a, b)| a.bitwise_eq(b))
    }
}

pub fn bind(tape: &mut Tape, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        tape.param(t)
    } else {
        tape.constant(t)
    }
}
