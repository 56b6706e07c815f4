use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Trainable tensor with an accumulated gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Self { value, grad: None }
    }

    /// Adds `g` into the gradient slot.
    pub fn accumulate(&mut self, g: &Tensor) -> Result<()> {
        if g.shape() != self.value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate",
                lhs: self.value.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        match &mut self.grad {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => self.grad = Some(g.clone()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}
